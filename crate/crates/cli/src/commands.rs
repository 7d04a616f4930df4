//! Subcommand implementations and the exit-code contract.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use thiserror::Error;
use wildgrad_core::driver::{make_schedule, run_construction, Construction, DriverError, RunOptions, RunReport};
use wildgrad_core::field::AffineBase;
use wildgrad_core::geometry::{Cube, Domain, MatrixPair};
use wildgrad_core::scenario::{validate_scenario, zeta, Scenario, ValidationReport, TWO_BRANCH};
use wildgrad_core::stage::StageError;

use crate::config::{parse_config, Component, ConfigError, ExportKind, RunConfig};
use crate::export::{raster, sidecar, write_field_csv, write_pgm};
use crate::fixtures::{load_scenario, load_tn, mat_from_rows, FixtureError, TnFixture};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SCENARIO: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;
pub const EXIT_BOUND: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("bound: {0}")]
    Bound(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => EXIT_IO,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Scenario(_) => EXIT_SCENARIO,
            CliError::Precondition(_) => EXIT_PRECONDITION,
            CliError::Bound(_) => EXIT_BOUND,
        }
    }
}

impl From<FixtureError> for CliError {
    fn from(e: FixtureError) -> Self {
        match e {
            FixtureError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Scenario(other.to_string()),
        }
    }
}

impl From<DriverError> for CliError {
    fn from(e: DriverError) -> Self {
        let msg = e.to_string();
        match e {
            DriverError::Config(_) => ConfigError::Constraints(vec![msg]).into(),
            DriverError::Scenario(_) => CliError::Scenario(msg),
            DriverError::Precondition(_) => CliError::Precondition(msg),
            DriverError::Stage { err, .. } => match err {
                StageError::Precondition(_) => CliError::Precondition(msg),
                StageError::Scenario(_) => CliError::Scenario(msg),
                _ => CliError::Bound(msg),
            },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// Reads a configuration; a relative scenario path is taken relative to the
/// configuration file.
pub fn read_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(p) = path else { return Ok(RunConfig::default()) };
    let mut cfg = parse_config(&fs::read_to_string(p).map_err(io_err(p))?)?;
    if cfg.scenario != TWO_BRANCH && Path::new(&cfg.scenario).is_relative() {
        if let Some(dir) = p.parent() {
            cfg.scenario = dir.join(&cfg.scenario).to_string_lossy().into_owned();
        }
    }
    Ok(cfg)
}

/// Ω and the base data of a configuration.
pub fn problem(cfg: &RunConfig, s: &Scenario) -> Result<(Domain, AffineBase), CliError> {
    let boxes = cfg
        .omega
        .iter()
        .map(|b| {
            let center: Vec<f64> = b.lo.iter().zip(&b.hi).map(|(l, h)| 0.5 * (l + h)).collect();
            Cube::new(center, 0.5 * (b.hi[0] - b.lo[0]))
        })
        .collect();
    let domain = Domain::new(boxes).map_err(|e| ConfigError::Constraints(vec![format!("omega: {e}")]))?;
    let base = match &cfg.base {
        Some(b) => {
            let grad = mat_from_rows(&b.grad).map_err(|e| ConfigError::Constraints(vec![format!("base.grad: {e}")]))?;
            let v = mat_from_rows(&b.v).map_err(|e| ConfigError::Constraints(vec![format!("base.v: {e}")]))?;
            let u0 = if b.u0.is_empty() { vec![0.0; grad.rows] } else { b.u0.clone() };
            AffineBase { u0, grad, v }
        }
        None => {
            let y = zeta(s, 1, cfg.lambda1, &MatrixPair::zeros(s.m, s.n)).map_err(|e| CliError::Scenario(e.to_string()))?;
            AffineBase { u0: vec![0.0; s.m], grad: y.first, v: y.second }
        }
    };
    Ok((domain, base))
}

pub fn options(cfg: &RunConfig) -> RunOptions {
    RunOptions {
        c_hat: cfg.c_hat,
        probes: cfg.probes,
        probe_samples: cfg.probe_samples,
        probe_radius: cfg.probe_radius,
        weak_tests: cfg.weak_tests,
        quad_depth: cfg.quad_depth,
        mc_samples: cfg.mc_samples,
        ..RunOptions::default()
    }
}

const VALIDATION_SAMPLES: usize = 2000;

pub fn validate(cfg: &RunConfig, s: &Scenario) -> Result<ValidationReport, CliError> {
    let rep = validate_scenario(s, VALIDATION_SAMPLES, cfg.seed);
    if rep.pass() {
        Ok(rep)
    } else {
        let failed: Vec<String> = rep.checks.iter().filter(|c| !c.pass).map(|c| format!("{}: {}", c.name, c.detail)).collect();
        Err(CliError::Scenario(failed.join("; ")))
    }
}

/// Validates the scenario and runs the construction.
pub fn construct(cfg: &RunConfig) -> Result<(Scenario, Construction), CliError> {
    let s = load_scenario(&cfg.scenario)?;
    validate(cfg, &s)?;
    let (domain, base) = problem(cfg, &s)?;
    let sched = make_schedule(cfg.delta, cfg.lambda1, cfg.r1, s.r0, cfg.k)?;
    let c = run_construction(&s, base, domain, &sched, &options(cfg), cfg.seed)?;
    Ok((s, c))
}

pub fn report_json(r: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

pub fn write_string(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn export_field_file(s: &Scenario, c: &Construction, cfg: &RunConfig, path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    let grid: Vec<usize> = (0..c.field.n()).map(|i| cfg.grid_at(i)).collect();
    write_field_csv(s, &c.field, &grid, &mut w).map_err(io_err(path))
}

pub fn export_raster_file(s: &Scenario, c: &Construction, cfg: &RunConfig, comp: Component, path: &Path) -> Result<(), CliError> {
    let grid: Vec<usize> = (0..c.field.n()).map(|i| cfg.grid_at(i)).collect();
    let r = raster(s, &c.field, &grid, comp).map_err(|e| ConfigError::Constraints(vec![e]))?;
    let mut w = create(path)?;
    write_pgm(&r, &mut w).map_err(io_err(path))?;
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    write_string(&PathBuf::from(side), &sidecar(&r, comp))
}

/// `run`: writes `report.json` and the configured exports; fails with the
/// bound exit code when any report row fails.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> Result<RunReport, CliError> {
    let (s, c) = construct(cfg)?;
    write_string(&out.join("report.json"), &report_json(&c.report))?;
    for e in &cfg.export {
        let path = out.join(&e.path);
        match e.kind {
            ExportKind::Field => export_field_file(&s, &c, cfg, &path)?,
            ExportKind::Raster => export_raster_file(&s, &c, cfg, e.component.unwrap_or(Component::BranchLabel), &path)?,
        }
    }
    if c.report.pass() {
        Ok(c.report)
    } else {
        Err(CliError::Bound(format!("{} report rows failed; see {}", failed_rows(&c.report).len(), out.join("report.json").display())))
    }
}

/// Human-readable names of the failing rows of a report.
pub fn failed_rows(r: &RunReport) -> Vec<String> {
    let mut out = Vec::new();
    for st in &r.stages {
        for b in st.bounds.iter().filter(|b| !b.pass) {
            out.push(format!("stage {} class {}: {}", st.params.input.stage, b.class, b.name));
        }
    }
    for row in r.increment_l1.iter().chain(&r.linf_drift).chain(&r.boundary).filter(|r| !r.pass) {
        out.push(format!("stage {}: {}", row.stage, row.name));
    }
    for g in r.graph_l1.iter().filter(|g| !g.pass) {
        out.push(format!("stage {}: graph residual {:e} above {:e}", g.stage, g.l1, g.bound));
    }
    if !r.graph_decreasing {
        out.push("graph residual is not strictly decreasing".into());
    }
    for p in r.persistence.iter().filter(|p| !p.pass) {
        out.push(format!("persistence q={} p={} class {} k={}", p.q, p.p, p.class, p.k));
    }
    out
}

/// Plain-text summary of a report.
pub fn summarize(r: &RunReport) -> String {
    let mut s = String::new();
    let mark = |p: bool| if p { "PASS" } else { "FAIL" };
    s.push_str(&format!("scenario {} seed {} K = {} delta = {}\n", r.scenario, r.seed, r.schedule.k, r.schedule.delta));
    for st in &r.stages {
        let p = &st.params;
        s.push_str(&format!(
            "{} stage {}: lambda {} -> {}, eps' = {:.3e}, ell' = {:.3e}, {} bounds, C0 = {:.4}, ratio {:.4}\n",
            mark(st.pass()),
            p.input.stage,
            p.input.lambda,
            p.input.mu,
            p.eps_prime,
            p.ell_prime,
            st.bounds.len(),
            st.c0_estimate,
            st.c0_ratio
        ));
    }
    for row in r.increment_l1.iter().chain(&r.linf_drift).chain(&r.boundary) {
        s.push_str(&format!("{} stage {}: {} = {:.6e} (bound {:.6e})\n", mark(row.pass), row.stage, row.name, row.achieved, row.required));
    }
    for g in &r.graph_l1 {
        s.push_str(&format!(
            "{} stage {}: graph residual {:.6e} (bound {:.6e}, empirical C {:.4})\n",
            mark(g.pass),
            g.stage,
            g.l1,
            g.bound,
            g.c_hat_empirical
        ));
    }
    s.push_str(&format!("{} graph residual strictly decreasing\n", mark(r.graph_decreasing)));
    if !r.persistence.is_empty() {
        let worst = r.persistence.iter().map(|p| p.fraction / p.bound).fold(f64::INFINITY, f64::min);
        let all = r.persistence.iter().all(|p| p.pass);
        s.push_str(&format!("{} persistence: {} rows, smallest fraction/bound {:.4}\n", mark(all), r.persistence.len(), worst));
    }
    let w = &r.wildness;
    s.push_str(&format!(
        "INFO oscillation: {}/{} probes of radius {:.4e} with spread >= {} (smallest {:.4})\n",
        w.passed,
        w.probes,
        w.radius,
        w.d0,
        w.min_spread
    ));
    s.push_str(&format!("weak divergence residual {:.3e} at depth {}\n", r.weak_div.max_residual, r.weak_div.depth));
    s.push_str(&format!("overall: {}\n", mark(r.pass())));
    s
}

/// `validate-tn`: the configuration built from a fixture, echoed back.
pub fn cmd_validate_tn(path: &Path) -> Result<String, CliError> {
    let cfg = load_tn(path)?;
    let fx = TnFixture::from_config(&cfg);
    Ok(format!(
        "valid T_{} configuration, tau = {:.6}\n{}",
        cfg.len(),
        cfg.tau(),
        toml::to_string(&fx).expect("fixture serializes")
    ))
}

/// `report`: reads a report file and summarizes it.
pub fn cmd_report(path: &Path) -> Result<RunReport, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Parse { line: e.line(), column: e.column(), message: e.to_string() }.into())
}
