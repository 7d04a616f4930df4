//! Scenario and `T_N` fixture files.
//!
//! A scenario fixture describes an affine-in-ρ family with a piecewise-affine
//! scalar σ:
//!
//! ```toml
//! name = "two-branch-copy"
//! m = 1
//! n = 1
//! r0 = 0.1
//! delta1 = 0.2
//! delta2 = 0.6
//! k0 = [2.0, 3.0]
//! k1 = [[-1.0, 1.0], [1.0, -1.0]]
//!
//! [sigma]
//! breaks = [-1.0, 1.0]
//! pieces = [[1.0, 2.0], [-1.0, 0.0], [1.0, -2.0]]
//!
//! [[gamma]]
//! p = [1.0]
//! a = [1.0]
//! b = [[0.0]]
//!
//! [[gamma]]
//! p = [-1.0]
//! a = [1.0]
//! b = [[0.0]]
//! ```
//!
//! The γ's must sum to zero. File scenarios use the generic multi-start
//! membership solver, which is much slower than the closed form behind the
//! built-in `two-branch`.
//!
//! A `T_N` fixture lists the base point ρ and one `[[corner]]` per index
//! with its rank-one direction and κ.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wildgrad_core::geometry::{Mat, MatrixPair, WaveVector};
use wildgrad_core::scenario::{two_branch_scenario, AffineFamily, PiecewiseAffine, Scenario, TWO_BRANCH};
use wildgrad_core::tnconfig::{build_tn, TNConfig};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

/// Row-list matrix.
pub type Rows = Vec<Vec<f64>>;

pub fn mat_from_rows(rows: &Rows) -> Result<Mat, String> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err("matrix rows must be non-empty and of equal length".into());
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Mat::from_rows(r, c, &flat))
}

pub fn rows_of(m: &Mat) -> Rows {
    (0..m.rows).map(|i| (0..m.cols).map(|j| m.get(i, j)).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSpec {
    pub p: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Rows,
}

impl GammaSpec {
    fn wave(&self) -> Result<WaveVector, String> {
        WaveVector::new(self.p.clone(), self.a.clone(), mat_from_rows(&self.b)?).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFixture {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub r0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub k0: Vec<f64>,
    pub k1: Vec<Vec<f64>>,
    pub sigma: PiecewiseAffine,
    pub gamma: Vec<GammaSpec>,
}

impl ScenarioFixture {
    pub fn build(&self) -> Result<Scenario, String> {
        if self.m != 1 || self.n != 1 {
            return Err(format!("a scalar sigma table needs m = n = 1, got m = {}, n = {}", self.m, self.n));
        }
        if self.sigma.pieces.len() != self.sigma.breaks.len() + 1 {
            return Err("sigma needs one more piece than breaks".into());
        }
        if self.sigma.breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err("sigma breaks must increase".into());
        }
        let gammas = self.gamma.iter().map(GammaSpec::wave).collect::<Result<Vec<_>, _>>()?;
        let fam = AffineFamily {
            m: self.m,
            n: self.n,
            r0: self.r0,
            delta1: self.delta1,
            delta2: self.delta2,
            k0: self.k0.clone(),
            k1: self.k1.clone(),
            gammas,
        };
        fam.scenario(&self.name, self.sigma.clone().into_sigma(), None).map_err(|e| e.to_string())
    }
}

fn read(path: &Path) -> Result<String, FixtureError> {
    std::fs::read_to_string(path).map_err(|source| FixtureError::Io { path: path.display().to_string(), source })
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, FixtureError> {
    toml::from_str(text).map_err(|e| FixtureError::Parse { path: path.display().to_string(), message: e.to_string() })
}

/// The built-in scenario by name, or a fixture file.
pub fn load_scenario(spec: &str) -> Result<Scenario, FixtureError> {
    if spec == TWO_BRANCH {
        return Ok(two_branch_scenario());
    }
    let path = Path::new(spec);
    let fx: ScenarioFixture = parse(path, &read(path)?)?;
    fx.build().map_err(|message| FixtureError::Invalid { path: spec.into(), message })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub first: Rows,
    pub second: Rows,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CornerSpec {
    pub p: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Rows,
    pub kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TnFixture {
    pub rho: PairSpec,
    pub corner: Vec<CornerSpec>,
}

impl TnFixture {
    pub fn build(&self) -> Result<TNConfig, String> {
        let rho = MatrixPair::new(mat_from_rows(&self.rho.first)?, mat_from_rows(&self.rho.second)?);
        let mut gammas = Vec::new();
        let mut kappas = Vec::new();
        for c in &self.corner {
            gammas.push(GammaSpec { p: c.p.clone(), a: c.a.clone(), b: c.b.clone() }.wave()?);
            kappas.push(c.kappa);
        }
        build_tn(rho, gammas, kappas).map_err(|e| e.to_string())
    }

    pub fn from_config(cfg: &TNConfig) -> Self {
        TnFixture {
            rho: PairSpec { first: rows_of(&cfg.rho.first), second: rows_of(&cfg.rho.second) },
            corner: cfg
                .gammas
                .iter()
                .zip(&cfg.kappas)
                .map(|(g, k)| CornerSpec { p: g.p.clone(), a: g.a.clone(), b: rows_of(&g.b), kappa: *k })
                .collect(),
        }
    }
}

pub fn load_tn(path: &Path) -> Result<TNConfig, FixtureError> {
    let fx: TnFixture = parse(path, &read(path)?)?;
    fx.build().map_err(|message| FixtureError::Invalid { path: path.display().to_string(), message })
}
