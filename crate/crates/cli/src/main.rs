use std::path::PathBuf;
use std::process::exit;

use clap::{Parser, Subcommand};
use wildgrad::commands::{
    self, cmd_report, cmd_run, cmd_validate_tn, construct, export_field_file, export_raster_file, failed_rows, read_config, summarize,
    CliError, EXIT_BOUND, EXIT_OK,
};
use wildgrad::config::{Component, RunConfig};
use wildgrad::fixtures::load_scenario;

/// Convex integration for wild Lipschitz solutions of div σ(Du) = 0.
#[derive(Parser)]
#[command(name = "wildgrad", version)]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Checks the standing assumptions of the configured scenario.
    ValidateScenario,
    /// Builds and checks a T_N configuration fixture.
    ValidateTn { fixture: PathBuf },
    /// Runs the construction and writes report.json plus configured exports.
    Run,
    /// Writes the constructed field on the configured grid as CSV.
    ExportField {
        #[arg(long, default_value = "field.csv")]
        file: PathBuf,
    },
    /// Writes a PGM raster of one component of the constructed field.
    ExportRaster {
        #[arg(long, value_enum)]
        component: Component,
        #[arg(long, default_value = "field.pgm")]
        file: PathBuf,
    },
    /// Summarizes a report.json and exits by its verdict.
    Report { path: PathBuf },
}

fn configure(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = read_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    match &cli.cmd {
        Cmd::ValidateScenario => {
            let cfg = configure(cli)?;
            let s = load_scenario(&cfg.scenario)?;
            let rep = commands::validate(&cfg, &s)?;
            for c in &rep.checks {
                println!("PASS {}: {}", c.name, c.detail);
            }
        }
        Cmd::ValidateTn { fixture } => print!("{}", cmd_validate_tn(fixture)?),
        Cmd::Run => {
            let cfg = configure(cli)?;
            let rep = cmd_run(&cfg, &cli.out)?;
            print!("{}", summarize(&rep));
        }
        Cmd::ExportField { file } => {
            let cfg = configure(cli)?;
            let (s, c) = construct(&cfg)?;
            export_field_file(&s, &c, &cfg, &cli.out.join(file))?;
        }
        Cmd::ExportRaster { component, file } => {
            let cfg = configure(cli)?;
            let (s, c) = construct(&cfg)?;
            export_raster_file(&s, &c, &cfg, *component, &cli.out.join(file))?;
        }
        Cmd::Report { path } => {
            let rep = cmd_report(path)?;
            print!("{}", summarize(&rep));
            if !rep.pass() {
                for f in failed_rows(&rep) {
                    eprintln!("failed: {f}");
                }
                return Ok(EXIT_BOUND);
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() {
    let cli = Cli::parse();
    if let Some(t) = std::env::var("WILDGRAD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("warning: WILDGRAD_THREADS ignored: {e}");
        }
    }
    let code = match dispatch(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    exit(code);
}
