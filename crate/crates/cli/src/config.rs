//! Run configuration: a TOML file with top-level scalars, an optional
//! `[base]` table and `[[omega]]` / `[[export]]` arrays.
//!
//! ```toml
//! scenario = "two-branch"   # or a path to a scenario fixture
//! delta = 0.1
//! k = 3
//! seed = 42
//! grid = [1024]
//!
//! [[omega]]
//! lo = [0.0]
//! hi = [1.0]
//!
//! [[export]]
//! kind = "field"
//! path = "field.csv"
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Constraints(Vec<String>),
}

/// An axis-aligned cube `[lo, hi]` of Ω.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Affine base data `ū(x) = u0 + grad·x`, `V̄ ≡ v`; matrices as row lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    #[serde(default)]
    pub u0: Vec<f64>,
    pub grad: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportKind {
    Field,
    Raster,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    /// Frobenius norm of `Du`.
    DuNorm,
    /// Corner label of the pinned region, 0 elsewhere.
    BranchLabel,
    /// `|σ(Du) − V|`.
    GraphGap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSpec {
    pub kind: ExportKind,
    /// Relative to the output directory.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<Component>,
}

fn default_scenario() -> String {
    "two-branch".into()
}
fn default_omega() -> Vec<BoxSpec> {
    vec![BoxSpec { lo: vec![0.0], hi: vec![1.0] }]
}
fn default_delta() -> f64 {
    0.1
}
fn default_k() -> usize {
    3
}
fn default_seed() -> u64 {
    42
}
fn default_lambda1() -> f64 {
    0.7
}
fn default_r1() -> f64 {
    0.02
}
fn default_grid() -> Vec<usize> {
    vec![1024]
}
fn default_mc() -> usize {
    4000
}
fn default_probes() -> usize {
    100
}
fn default_probe_samples() -> usize {
    512
}
fn default_weak_tests() -> usize {
    8
}
fn default_quad_depth() -> u32 {
    10
}
fn default_c_hat() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_scenario")]
    pub scenario: String,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_r1")]
    pub r1: f64,
    /// Points per axis of each Ω box for field and raster exports.
    #[serde(default = "default_grid")]
    pub grid: Vec<usize>,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_radius: Option<f64>,
    #[serde(default = "default_weak_tests")]
    pub weak_tests: usize,
    #[serde(default = "default_quad_depth")]
    pub quad_depth: u32,
    #[serde(default = "default_c_hat")]
    pub c_hat: f64,
    /// Defaults to `ζ_1(λ_1, 0)` of the scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseSpec>,
    #[serde(default = "default_omega")]
    pub omega: Vec<BoxSpec>,
    #[serde(default)]
    pub export: Vec<ExportSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_config("").expect("empty configuration is valid")
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, column)
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Parse { line, column, message: e.message().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical TOML text of a configuration; parsing it gives the same value.
pub fn serialize_config(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("configuration serializes")
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if !(self.delta > 0.0 && self.delta < 1.0) {
            errs.push(format!("delta = {} must lie in (0, 1)", self.delta));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1 < 1.0) {
            errs.push(format!("lambda1 = {} must lie in [0, 1)", self.lambda1));
        }
        if self.seed > i64::MAX as u64 {
            errs.push(format!("seed = {} exceeds the TOML integer range", self.seed));
        }
        if !(self.r1 > 0.0) {
            errs.push(format!("r1 = {} must be positive", self.r1));
        }
        if self.omega.is_empty() {
            errs.push("omega needs at least one box".into());
        }
        let n = self.omega.first().map_or(0, |b| b.lo.len());
        for (i, b) in self.omega.iter().enumerate() {
            if b.lo.len() != n || b.hi.len() != n || n == 0 {
                errs.push(format!("omega[{i}] must have lo and hi of the common dimension {n}"));
                continue;
            }
            let sides: Vec<f64> = b.lo.iter().zip(&b.hi).map(|(l, h)| h - l).collect();
            if sides.iter().any(|s| !(*s > 0.0)) {
                errs.push(format!("omega[{i}] has an empty side"));
            } else if sides.iter().any(|s| (s - sides[0]).abs() > 1e-12 * sides[0]) {
                errs.push(format!("omega[{i}] is not a cube"));
            }
        }
        if self.grid.is_empty() || self.grid.iter().any(|g| *g < 2) {
            errs.push("grid needs at least 2 points per axis".into());
        } else if self.grid.len() != 1 && self.grid.len() != n {
            errs.push(format!("grid has {} entries for a {n}-dimensional domain", self.grid.len()));
        }
        if self.mc_samples == 0 {
            errs.push("mc_samples must be positive".into());
        }
        if self.weak_tests == 0 {
            errs.push("weak_tests must be positive".into());
        }
        if let Some(r) = self.probe_radius {
            if !(r > 0.0) {
                errs.push(format!("probe_radius = {r} must be positive"));
            }
        }
        if !(self.c_hat > 0.0) {
            errs.push(format!("c_hat = {} must be positive", self.c_hat));
        }
        if let Some(b) = &self.base {
            let rows = b.grad.len();
            let cols = b.grad.first().map_or(0, Vec::len);
            if rows == 0 || cols != n || b.grad.iter().any(|r| r.len() != cols) {
                errs.push(format!("base.grad must be a non-empty m x {n} matrix"));
            }
            if b.v.len() != rows || b.v.iter().any(|r| r.len() != cols) {
                errs.push("base.v must have the shape of base.grad".into());
            }
            if !b.u0.is_empty() && b.u0.len() != rows {
                errs.push("base.u0 must have one entry per row of base.grad".into());
            }
        }
        for (i, e) in self.export.iter().enumerate() {
            if e.path.is_empty() {
                errs.push(format!("export[{i}] needs a path"));
            }
            if e.kind == ExportKind::Raster && e.component.is_none() {
                errs.push(format!("export[{i}] is a raster and needs a component"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Constraints(errs))
        }
    }

    /// Grid points per axis for axis `i`.
    pub fn grid_at(&self, i: usize) -> usize {
        if self.grid.len() == 1 {
            self.grid[0]
        } else {
            self.grid[i]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("scenario = \"two-branch\"").unwrap();
        assert_eq!(c.delta, 0.1);
        assert_eq!(c.k, 3);
        assert_eq!(c.seed, 42);
        assert_eq!(c.omega, vec![BoxSpec { lo: vec![0.0], hi: vec![1.0] }]);
    }

    #[test]
    fn out_of_range_delta_is_itemized() {
        match parse_config("delta = 1.5\ngrid = [1]").unwrap_err() {
            ConfigError::Constraints(v) => {
                assert_eq!(v.len(), 2);
                assert!(v[0].contains("delta"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_keys_report_their_position() {
        match parse_config("delta = 0.2\nbogus = 1\n").unwrap_err() {
            ConfigError::Parse { line, column, message } => {
                assert_eq!((line, column), (2, 1));
                assert!(message.contains("bogus"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
        assert_eq!(line_col("ab", 0), (1, 1));
    }
}
