//! Condition O_N data: the maps (κ_i, γ_i)(ρ), the sets S, L, Σ, and their
//! membership solvers with witnesses.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{wave_cone_residual, Mat, MatrixPair, WaveVector};
use crate::linalg::{self, levenberg_marquardt};
use crate::num;
use crate::rng;
use crate::tnconfig::{build_tn, cyclic_coeffs, TNConfig, TnError};

pub type KappaMap = Arc<dyn Fn(&MatrixPair) -> Vec<f64> + Send + Sync>;
pub type GammaMap = Arc<dyn Fn(&MatrixPair) -> Vec<WaveVector> + Send + Sync>;
pub type SigmaMap = Arc<dyn Fn(&Mat) -> Mat + Send + Sync>;

/// Default residual tolerance for the graph condition ξ_i² = σ(ξ_i¹).
pub const GRAPH_TOL: f64 = 1e-8;
/// Largest graph tolerance a configuration may request.
pub const GRAPH_TOL_MAX: f64 = 1e-4;
const DECOMPOSE_STARTS: usize = 32;
const DECOMPOSE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioError {
    Domain(String),
    /// The root search neither converged nor proved non-membership.
    Unresolved { best_residual: f64 },
    Invalid(String),
    NotInSigma { index: usize, point: MatrixPair },
    Tn(TnError),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Domain(s) => write!(f, "domain error: {s}"),
            ScenarioError::Unresolved { best_residual } => {
                write!(f, "membership solver did not converge (best residual {best_residual:e})")
            }
            ScenarioError::Invalid(s) => write!(f, "invalid scenario: {s}"),
            ScenarioError::NotInSigma { index, point } => {
                write!(f, "point {index} = {point} does not lie in Sigma(1)")
            }
            ScenarioError::Tn(e) => write!(f, "{e}"),
        }
    }
}

impl From<TnError> for ScenarioError {
    fn from(e: TnError) -> Self {
        ScenarioError::Tn(e)
    }
}

/// Witness for `Y = q ζ_i(λ′, ρ) + (1 − q) π_i(ρ′)`; `i` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub i: usize,
    pub lambda_prime: f64,
    pub q: f64,
    pub rho: MatrixPair,
    pub rho_prime: MatrixPair,
}

/// Non-membership verdict of a Σ search.
#[derive(Clone, Debug, PartialEq)]
pub struct NotFound {
    pub best_residual: Option<f64>,
}

/// Scenario-specific exact solvers.
pub trait ClosedForm: Send + Sync {
    /// The ρ with `|ρ| < r` and ζ_i(λ, ρ) = Y, if any.
    fn invert(&self, s: &Scenario, i: usize, r: f64, lambda: f64, y: &MatrixPair) -> Option<MatrixPair>;

    fn classify(&self, s: &Scenario, r: f64, lambda: f64, y: &MatrixPair) -> Option<(usize, MatrixPair)> {
        (1..=s.big_n).find_map(|i| self.invert(s, i, r, lambda, y).map(|rho| (i, rho)))
    }

    fn decompose(&self, s: &Scenario, r: f64, lambda: f64, y: &MatrixPair) -> Option<Decomposition>;
}

#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub big_n: usize,
    pub r0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub kappa_map: KappaMap,
    pub gamma_map: GammaMap,
    pub sigma: SigmaMap,
    pub decomposer: Option<Arc<dyn ClosedForm>>,
    pub graph_tol: f64,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("m", &self.m)
            .field("n", &self.n)
            .field("N", &self.big_n)
            .field("r0", &self.r0)
            .field("delta1", &self.delta1)
            .field("delta2", &self.delta2)
            .finish()
    }
}

/// Anchors π_i and corners ξ_i at ρ.
pub struct Branches {
    pub pis: Vec<MatrixPair>,
    pub xis: Vec<MatrixPair>,
    pub kappas: Vec<f64>,
    pub gammas: Vec<WaveVector>,
}

impl Scenario {
    /// Dimension 2mn of the parameter ρ.
    pub fn dim(&self) -> usize {
        2 * self.m * self.n
    }

    pub fn branches(&self, rho: &MatrixPair) -> Branches {
        let kappas = (self.kappa_map)(rho);
        let gammas = (self.gamma_map)(rho);
        let mut pis = Vec::with_capacity(self.big_n);
        let mut xis = Vec::with_capacity(self.big_n);
        let mut pi = rho.clone();
        for (g, k) in gammas.iter().zip(&kappas) {
            let gp = g.to_pair();
            xis.push(pi.axpy(*k, &gp));
            pis.push(pi.clone());
            pi = &pi + &gp;
        }
        Branches { pis, xis, kappas, gammas }
    }

    pub fn xi(&self, i: usize, rho: &MatrixPair) -> MatrixPair {
        self.branches(rho).xis[i - 1].clone()
    }

    pub fn pi(&self, i: usize, rho: &MatrixPair) -> MatrixPair {
        self.branches(rho).pis[i - 1].clone()
    }

    /// ζ_i(λ, ρ) without the ball check.
    pub fn zeta_raw(&self, i: usize, lambda: f64, rho: &MatrixPair) -> MatrixPair {
        let b = self.branches(rho);
        b.xis[i - 1].lerp(lambda, &b.pis[i - 1])
    }

    fn check_ball(&self, rho: &MatrixPair, r: f64) -> Result<(), ScenarioError> {
        if rho.norm() > r * (1.0 + 1e-12) {
            return Err(ScenarioError::Domain(format!("|rho| = {} exceeds {}", rho.norm(), r)));
        }
        Ok(())
    }

    /// The T_N configuration (ζ_j(μ, ρ))_j, with κ′ = μκ.
    pub fn tn_at(&self, mu: f64, rho: &MatrixPair) -> Result<TNConfig, ScenarioError> {
        let b = self.branches(rho);
        Ok(build_tn(rho.clone(), b.gammas, b.kappas.iter().map(|k| mu * k).collect())?)
    }
}

/// ζ_i(λ, ρ) = λ ξ_i(ρ) + (1 − λ) π_i(ρ).
pub fn zeta(s: &Scenario, i: usize, lambda: f64, rho: &MatrixPair) -> Result<MatrixPair, ScenarioError> {
    s.check_ball(rho, s.r0)?;
    if i == 0 || i > s.big_n {
        return Err(ScenarioError::Domain(format!("branch index {i} outside 1..={}", s.big_n)));
    }
    Ok(s.zeta_raw(i, lambda, rho))
}

/// Row i of the coefficients with `π_i(ρ) = Σ_j ν_i^j(λ, ρ) ζ_j(λ, ρ)`.
pub fn pi_decomposition(s: &Scenario, i: usize, lambda: f64, rho: &MatrixPair) -> Result<Vec<f64>, ScenarioError> {
    if !(lambda > s.delta2 && lambda <= 1.0) {
        return Err(ScenarioError::Domain(format!("lambda = {lambda} must lie in (delta2, 1]")));
    }
    s.check_ball(rho, s.r0)?;
    let t: Vec<f64> = (s.kappa_map)(rho).iter().map(|k| 1.0 / (k * lambda)).collect();
    let c = cyclic_coeffs(&t)?;
    Ok(c.nu[i - 1].clone())
}

fn ball_map(w: &[f64], r: f64) -> Vec<f64> {
    let n2: f64 = w.iter().map(|v| v * v).sum();
    let f = r / num::sqrt(1.0 + n2);
    w.iter().map(|v| v * f).collect()
}

fn seed_of(y: &MatrixPair) -> u64 {
    y.key().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, k| (h ^ k).wrapping_mul(0x0100_0000_01b3))
}

/// Membership in S_i^r(λ) with witness ρ; closed form when available.
pub fn classify_s(s: &Scenario, r: f64, lambda: f64, y: &MatrixPair) -> Result<Option<(usize, MatrixPair)>, ScenarioError> {
    if let Some(cf) = &s.decomposer {
        return Ok(cf.classify(s, r, lambda, y));
    }
    classify_generic(s, r, lambda, y)
}

/// Root search for ζ_i(λ, ρ) = Y over all branches.
pub fn classify_generic(s: &Scenario, r: f64, lambda: f64, y: &MatrixPair) -> Result<Option<(usize, MatrixPair)>, ScenarioError> {
    let d = s.dim();
    let tol = 1e-12 * (1.0 + y.norm());
    let mut unresolved: Option<f64> = None;
    let mut rng = rng::stream(seed_of(y), 0x636c);
    for i in 1..=s.big_n {
        let f = |x: &[f64]| {
            let rho = MatrixPair::from_slice(s.m, s.n, x);
            (&s.zeta_raw(i, lambda, &rho) - y).to_vec()
        };
        let mut best = f64::INFINITY;
        let mut settled = false;
        for start in 0..4 {
            let x0: Vec<f64> = if start == 0 {
                alloc::vec![0.0; d]
            } else {
                rng::in_ball(&mut rng, d, s.r0)
            };
            let out = levenberg_marquardt(&f, &x0, tol, 80);
            best = best.min(out.residual);
            if out.residual < tol {
                let rho = MatrixPair::from_slice(s.m, s.n, &out.x);
                if rho.norm() < r {
                    return Ok(Some((i, rho)));
                }
                settled = true;
                break;
            }
        }
        if !settled && best < 1e-6 {
            unresolved = Some(unresolved.map_or(best, |u: f64| u.min(best)));
        }
    }
    match unresolved {
        Some(best_residual) => Err(ScenarioError::Unresolved { best_residual }),
        None => Ok(None),
    }
}

impl Decomposition {
    pub fn zeta_point(&self, s: &Scenario) -> MatrixPair {
        s.zeta_raw(self.i, self.lambda_prime, &self.rho)
    }

    pub fn pi_point(&self, s: &Scenario) -> MatrixPair {
        s.pi(self.i, &self.rho_prime)
    }

    pub fn reconstruct(&self, s: &Scenario) -> MatrixPair {
        self.zeta_point(s).lerp(self.q, &self.pi_point(s))
    }

    /// Checks every constraint of the witness against `Y ∈ Σ^r(λ)`.
    pub fn verify(&self, s: &Scenario, r: f64, lambda: f64, y: &MatrixPair) -> Result<(), String> {
        if self.i == 0 || self.i > s.big_n {
            return Err(format!("branch {} out of range", self.i));
        }
        if self.lambda_prime < s.delta2 - 1e-12 || self.lambda_prime > lambda + 1e-12 {
            return Err(format!("lambda' = {} outside [delta2, {lambda}]", self.lambda_prime));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(format!("q = {} outside [0,1]", self.q));
        }
        if !(self.rho.norm() < r) || !(self.rho_prime.norm() < r) {
            return Err(format!("witness parameters leave the ball of radius {r}"));
        }
        let rec = self.reconstruct(s).dist(y);
        if rec > 1e-8 * (1.0 + y.norm()) {
            return Err(format!("reconstruction residual {rec:e}"));
        }
        let dgap = &self.zeta_point(s) - &self.pi_point(s);
        let g = wave_cone_residual(&dgap);
        if g > 1e-8 * (1.0 + dgap.norm()) {
            return Err(format!("wave-cone residual {g:e}"));
        }
        Ok(())
    }
}

/// A witness for `Y ∈ Σ^r(λ)`; closed form when available, else multi-start search.
pub fn decompose_sigma(s: &Scenario, r: f64, lambda: f64, y: &MatrixPair) -> Result<Decomposition, NotFound> {
    if let Some(cf) = &s.decomposer {
        return cf.decompose(s, r, lambda, y).ok_or(NotFound { best_residual: None });
    }
    decompose_generic(s, r, lambda, y)
}

fn wave_residual_vec(g: &MatrixPair) -> Vec<f64> {
    // (A(I − aaᵀ), Ba) for the direction minimizing the cone residual; smooth in g
    // away from eigenvalue crossings.
    let (m, n) = (g.m(), g.n());
    let a = match WaveVector::from_pair(g, f64::INFINITY) {
        Ok(w) => w.a,
        Err(_) => {
            let mut e = alloc::vec![0.0; n];
            e[0] = 1.0;
            e
        }
    };
    let mut out = Vec::with_capacity(m * n + m);
    for i in 0..m {
        let aa: f64 = (0..n).map(|j| g.first.get(i, j) * a[j]).sum();
        for j in 0..n {
            out.push(g.first.get(i, j) - aa * a[j]);
        }
    }
    out.extend(g.second.apply(&a));
    out
}

fn ball_unmap(rho: &[f64], r: f64) -> Vec<f64> {
    let n2: f64 = rho.iter().map(|v| v * v).sum();
    let f = 1.0 / num::sqrt((r * r - n2).max(1e-300));
    rho.iter().map(|v| v * f).collect()
}

/// One damped least-squares run on branch `i` from `x0 = (λ′, q, w, w′)`,
/// where `ρ = r w / √(1 + |w|²)`; the residual when no witness is found.
fn generic_solve(s: &Scenario, i: usize, r: f64, lambda: f64, y: &MatrixPair, x0: &[f64]) -> Result<Decomposition, f64> {
    let d = s.dim();
    let (m, n) = (s.m, s.n);
    let lo = s.delta2;
    let unpack = |x: &[f64]| {
        let lp = x[0].clamp(lo, lambda);
        let q = x[1].clamp(0.0, 1.0);
        let rho = MatrixPair::from_slice(m, n, &ball_map(&x[2..2 + d], r));
        let rhop = MatrixPair::from_slice(m, n, &ball_map(&x[2 + d..], r));
        (lp, q, rho, rhop)
    };
    let f = |x: &[f64]| {
        let (lp, q, rho, rhop) = unpack(x);
        let z = s.zeta_raw(i, lp, &rho);
        let p = s.pi(i, &rhop);
        let mut out = (&z.lerp(q, &p) - y).to_vec();
        out.extend(wave_residual_vec(&(&z - &p)));
        out
    };
    let out = levenberg_marquardt(&f, x0, DECOMPOSE_TOL, 60);
    if out.residual < DECOMPOSE_TOL {
        let (lp, q, rho, rhop) = unpack(&out.x);
        let dec = Decomposition { i, lambda_prime: lp, q, rho, rho_prime: rhop };
        if dec.verify(s, r, lambda, y).is_ok() {
            return Ok(dec);
        }
    }
    Err(out.residual)
}

/// Seeded multi-start damped least squares over (λ′, q, ρ, ρ′), branch by branch.
pub fn decompose_generic(s: &Scenario, r: f64, lambda: f64, y: &MatrixPair) -> Result<Decomposition, NotFound> {
    let d = s.dim();
    let lo = s.delta2;
    let mut best = f64::INFINITY;
    for i in 1..=s.big_n {
        let mut rng = rng::stream(seed_of(y), 0x6473 + i as u64);
        for start in 0..DECOMPOSE_STARTS {
            let mut x0 = alloc::vec![0.0; 2 + 2 * d];
            if start == 0 {
                x0[0] = lambda;
                x0[1] = 0.5;
            } else {
                x0[0] = rng::range(&mut rng, lo, lambda);
                x0[1] = rng::uniform(&mut rng);
                for v in x0[2..].iter_mut() {
                    *v = 0.7 * rng::normal(&mut rng);
                }
            }
            match generic_solve(s, i, r, lambda, y, &x0) {
                Ok(dec) => return Ok(dec),
                Err(res) => best = best.min(res),
            }
        }
    }
    Err(NotFound { best_residual: Some(best) })
}

/// A witness for `Y` continued from the witness `hint` of a nearby point: a
/// single run from the hint's coordinates. `None` does not prove
/// non-membership.
pub fn decompose_near(s: &Scenario, r: f64, lambda: f64, y: &MatrixPair, hint: &Decomposition) -> Option<Decomposition> {
    if let Some(cf) = &s.decomposer {
        return cf.decompose(s, r, lambda, y);
    }
    let mut x0 = alloc::vec![hint.lambda_prime, hint.q];
    x0.extend(ball_unmap(&hint.rho.to_vec(), r));
    x0.extend(ball_unmap(&hint.rho_prime.to_vec(), r));
    generic_solve(s, hint.i, r, lambda, y, &x0).ok()
}

/// `ζ_k(λ, ρ) = Y` continued from a nearby witness `ρ`; `None` does not
/// prove `Y ∉ S_k`.
pub fn classify_near(s: &Scenario, r: f64, lambda: f64, y: &MatrixPair, k: usize, hint: &MatrixPair) -> Option<MatrixPair> {
    if let Some(cf) = &s.decomposer {
        return match cf.classify(s, r, lambda, y) {
            Some((i, rho)) if i == k => Some(rho),
            _ => None,
        };
    }
    let tol = 1e-12 * (1.0 + y.norm());
    let f = |x: &[f64]| (&s.zeta_raw(k, lambda, &MatrixPair::from_slice(s.m, s.n, x)) - y).to_vec();
    let out = levenberg_marquardt(&f, &hint.to_vec(), tol, 80);
    let rho = MatrixPair::from_slice(s.m, s.n, &out.x);
    (out.residual < tol && rho.norm() < r).then_some(rho)
}

pub fn in_sigma(s: &Scenario, r: f64, lambda: f64, y: &MatrixPair) -> bool {
    decompose_sigma(s, r, lambda, y).is_ok()
}

pub fn in_s(s: &Scenario, r: f64, lambda: f64, y: &MatrixPair, k: usize) -> bool {
    matches!(classify_s(s, r, lambda, y), Ok(Some((i, _))) if i == k)
}

/// Distance from `p` to the complement of a set, by radial search along
/// `dirs`. `member(x, hint)` returns a witness for `x ∈` set; along each ray
/// `hint` is the witness of the last point found inside, so a failed
/// continuation only shortens the distance.
pub fn boundary_distance<W>(p: &MatrixPair, member: &dyn Fn(&MatrixPair, Option<&W>) -> Option<W>, dirs: &[MatrixPair], tmax: f64) -> f64 {
    let Some(w0) = member(p, None) else { return 0.0 };
    let mut best = tmax;
    for d in dirs {
        let mut last: Option<W> = None;
        let mut inside = 0.0;
        let mut t = (tmax / 1024.0).min(best);
        let mut outside = None;
        while t <= best {
            match member(&p.axpy(t, d), Some(last.as_ref().unwrap_or(&w0))) {
                Some(w) => {
                    last = Some(w);
                    inside = t;
                    t *= 2.0;
                }
                None => {
                    outside = Some(t);
                    break;
                }
            }
        }
        let Some(mut hi) = outside else { continue };
        let mut lo = inside;
        while hi - lo > BISECT_REL * hi {
            let mid = 0.5 * (lo + hi);
            match member(&p.axpy(mid, d), Some(last.as_ref().unwrap_or(&w0))) {
                Some(w) => {
                    last = Some(w);
                    lo = mid;
                }
                None => hi = mid,
            }
        }
        best = best.min(lo);
    }
    best
}

const BISECT_REL: f64 = 1e-6;

/// Continuation membership in Σ^r(λ) for [`boundary_distance`].
pub fn sigma_member(s: &Scenario, r: f64, lambda: f64) -> impl Fn(&MatrixPair, Option<&Decomposition>) -> Option<Decomposition> + '_ {
    move |x, hint| match hint {
        Some(h) => decompose_near(s, r, lambda, x, h),
        None => decompose_sigma(s, r, lambda, x).ok(),
    }
}

/// Continuation membership in S_k^r(λ) for [`boundary_distance`].
pub fn s_member(s: &Scenario, r: f64, lambda: f64, k: usize) -> impl Fn(&MatrixPair, Option<&MatrixPair>) -> Option<MatrixPair> + '_ {
    move |x, hint| match hint {
        Some(h) => classify_near(s, r, lambda, x, k, h),
        None => match classify_s(s, r, lambda, x) {
            Ok(Some((i, rho))) if i == k => Some(rho),
            _ => None,
        },
    }
}

fn probe_directions(s: &Scenario, rng: &mut rng::Rng, extra: usize) -> Vec<MatrixPair> {
    let d = s.dim();
    let mut dirs = Vec::new();
    for k in 0..d {
        for sign in [1.0, -1.0] {
            let mut v = alloc::vec![0.0; d];
            v[k] = sign;
            dirs.push(MatrixPair::from_slice(s.m, s.n, &v));
        }
    }
    for _ in 0..extra {
        dirs.push(MatrixPair::from_slice(s.m, s.n, &rng::on_sphere(rng, d, 1.0)));
    }
    dirs
}

/// Sampled gaps with safety factor 0.5, plus the raw figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaps {
    pub d_prime: f64,
    pub d0: f64,
    pub d_prime_raw: f64,
    pub d0_raw: f64,
}

/// Samples of ρ in the closed ball of radius `r`: center, axis extremes, sphere, interior.
fn ball_samples(s: &Scenario, r: f64, count: usize, rng: &mut rng::Rng) -> Vec<MatrixPair> {
    let d = s.dim();
    let mut out = alloc::vec![MatrixPair::zeros(s.m, s.n)];
    for k in 0..d {
        for sign in [1.0, -1.0] {
            let mut v = alloc::vec![0.0; d];
            v[k] = sign * r;
            out.push(MatrixPair::from_slice(s.m, s.n, &v));
        }
    }
    while out.len() < count {
        let v = if out.len() % 2 == 0 { rng::on_sphere(rng, d, r) } else { rng::in_ball(rng, d, r) };
        out.push(MatrixPair::from_slice(s.m, s.n, &v));
    }
    out
}

/// Minimum distance between two point clouds.
fn cloud_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for x in a {
        for y in b {
            let d: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
            best = best.min(d);
        }
    }
    num::sqrt(best)
}

/// Projected-corner gap `d0` and stage gap `d′`.
pub fn set_gaps(s: &Scenario, r: f64, s_rad: f64, mu: f64, samples: usize, seed: u64) -> Result<Gaps, ScenarioError> {
    let mut rng = rng::stream(seed, 0x6761);
    let pts = ball_samples(s, s.r0, samples.max(8), &mut rng);
    let proj: Vec<Vec<Vec<f64>>> = (1..=s.big_n)
        .map(|k| pts.iter().map(|rho| s.xi(k, rho).first.data.to_vec()).collect())
        .collect();
    let mut d0_raw = f64::INFINITY;
    for a in 0..s.big_n {
        for b in a + 1..s.big_n {
            d0_raw = d0_raw.min(cloud_gap(&proj[a], &proj[b]));
        }
    }
    if !(d0_raw > 0.0) {
        return Err(ScenarioError::Invalid(format!("projected corner sets touch (gap {d0_raw})")));
    }
    let dirs = probe_directions(s, &mut rng, 4);
    let near = ball_samples(s, r * (1.0 - 1e-9), (samples / 4).max(8), &mut rng);
    let mut dp = f64::INFINITY;
    let lambdas = [s.delta2, 0.5 * (s.delta2 + mu), mu];
    let member = sigma_member(s, s_rad, mu);
    for rho in &near {
        for i in 1..=s.big_n {
            for lp in lambdas {
                let p = s.zeta_raw(i, lp, rho);
                dp = dp.min(boundary_distance(&p, &member, &dirs, 1.0));
            }
            dp = dp.min(boundary_distance(&s.pi(i, rho), &member, &dirs, 1.0));
            let z = s.zeta_raw(i, mu, rho);
            dp = dp.min(boundary_distance(&z, &s_member(s, s_rad, mu, i), &dirs, 1.0));
        }
    }
    if !(dp > 0.0) {
        return Err(ScenarioError::Invalid(format!("nonpositive stage gap d' = {dp}")));
    }
    Ok(Gaps { d_prime: 0.5 * dp, d0: 0.5 * d0_raw, d_prime_raw: dp, d0_raw })
}

/// Smallest grid (λ₁, r₁) with every point in Σ^{r₁}(λ₁); returned as `(r1, lambda1)`.
pub fn compactness_fit(s: &Scenario, points: &[MatrixPair]) -> Result<(f64, f64), ScenarioError> {
    let r_step = s.r0 / 50.0;
    for (k, y) in points.iter().enumerate() {
        if !in_sigma(s, s.r0 * (1.0 - 1e-3), 1.0 - 1e-3, y) {
            return Err(ScenarioError::NotInSigma { index: k, point: y.clone() });
        }
    }
    if points.is_empty() {
        return Ok((r_step, s.delta2));
    }
    let base = s.delta2 * 100.0;
    let mut lambdas: Vec<f64> = (0..).map(|k| (base + k as f64) / 100.0).take_while(|l| *l < 1.0).collect();
    lambdas.push(1.0 - 1e-3);
    // Smallest radius first; the smallest admissible λ at that radius.
    for j in 1..50 {
        let r = j as f64 * r_step;
        for &lambda in &lambdas {
            if points.iter().all(|y| in_sigma(s, r, lambda, y)) {
                return Ok((r, lambda));
            }
        }
    }
    Ok((s.r0 * (1.0 - 1e-3), 1.0 - 1e-3))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub scenario: String,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn push(&mut self, name: &str, pass: bool, detail: String) {
        self.checks.push(Check { name: name.into(), pass, detail });
    }
}

fn min_gap_over(s: &Scenario, pts: &[MatrixPair], f: impl Fn(usize, &MatrixPair) -> Vec<f64>) -> f64 {
    let clouds: Vec<Vec<Vec<f64>>> = (1..=s.big_n).map(|k| pts.iter().map(|p| f(k, p)).collect()).collect();
    let mut g = f64::INFINITY;
    for a in 0..s.big_n {
        for b in a + 1..s.big_n {
            g = g.min(cloud_gap(&clouds[a], &clouds[b]));
        }
    }
    g
}

/// Numeric checks of (P1)/(P2) on sampled parameters.
pub fn validate_scenario(s: &Scenario, samples: usize, seed: u64) -> ValidationReport {
    let mut rep = ValidationReport { scenario: s.name.clone(), checks: Vec::new() };
    let samples = samples.max(1000);
    let mut rng = rng::stream(seed, 0x7661);
    let pts = ball_samples(s, s.r0, samples, &mut rng);

    let mut worst_sum = 0.0f64;
    let mut kappa_bad: Option<(usize, f64)> = None;
    let mut cone_worst = 0.0f64;
    let mut graph_worst = 0.0f64;
    let (klo, khi) = (1.0 / s.delta2, 1.0 / s.delta1);
    for rho in &pts {
        let b = s.branches(rho);
        let mut sum = MatrixPair::zeros(s.m, s.n);
        for g in &b.gammas {
            sum = &sum + &g.to_pair();
            let an = num::norm(&g.a);
            let ba = num::norm(&g.b.apply(&g.a));
            cone_worst = cone_worst.max(if an > 0.0 { ba / (g.b.norm() * an + 1.0) } else { f64::INFINITY });
        }
        worst_sum = worst_sum.max(sum.norm());
        for (k, kap) in b.kappas.iter().enumerate() {
            if (*kap < klo - 1e-12 || *kap > khi + 1e-12) && kappa_bad.is_none() {
                kappa_bad = Some((k + 1, *kap));
            }
        }
        for x in &b.xis {
            let sg = (s.sigma)(&x.first);
            let d: f64 = sg.data.iter().zip(x.second.data.iter()).map(|(u, v)| (u - v) * (u - v)).sum();
            graph_worst = graph_worst.max(num::sqrt(d));
        }
    }
    rep.push("gamma_sum", worst_sum <= 1e-12, format!("max |sum gamma_i| = {worst_sum:e}"));
    rep.push(
        "kappa_range",
        kappa_bad.is_none(),
        match kappa_bad {
            None => format!("all kappa in [{klo}, {khi}]"),
            Some((k, v)) => format!("kappa_{k} = {v} outside [{klo}, {khi}]"),
        },
    );
    rep.push("wave_cone", cone_worst <= 1e-12, format!("max normalized |B a| = {cone_worst:e}"));
    rep.push(
        "graph",
        graph_worst <= s.graph_tol,
        format!("max |sigma(xi^1) - xi^2| = {graph_worst:e} (tol {:e})", s.graph_tol),
    );
    let gx = min_gap_over(s, &pts, |k, p| s.xi(k, p).first.data.to_vec());
    let gp = min_gap_over(s, &pts, |k, p| s.pi(k, p).first.data.to_vec());
    rep.push("projected_corners_separated", gx > 1e-6, format!("min gap {gx}"));
    rep.push("projected_anchors_separated", gp > 1e-6, format!("min gap {gp}"));

    let mut rank_worst = f64::INFINITY;
    let d = s.dim();
    for lambda in [0.0, s.delta2, 0.5 * (s.delta2 + 1.0)] {
        for rho in pts.iter().take(32) {
            for i in 1..=s.big_n {
                let f = |x: &[f64]| s.zeta_raw(i, lambda, &MatrixPair::from_slice(s.m, s.n, x)).to_vec();
                let (j, rows) = linalg::jacobian_central(&f, &rho.to_vec(), 1e-6);
                let sv = linalg::singular_values(&j, rows, d);
                let ratio = sv[0] / sv[d - 1].max(1e-300);
                rank_worst = rank_worst.min(ratio);
            }
        }
    }
    rep.push("open_full_rank", rank_worst > 1e-8, format!("min singular ratio {rank_worst:e}"));

    let mut lambdas = alloc::vec![0.0];
    let base = s.delta2 * 100.0;
    let mut k = 0;
    while (base + k as f64) / 100.0 < 1.0 {
        lambdas.push((base + k as f64) / 100.0);
        k += 1;
    }
    let mut collision: Option<(f64, usize, usize)> = None;
    'outer: for lambda in lambdas {
        for rho in pts.iter().take(96) {
            for i in 1..=s.big_n {
                let y = s.zeta_raw(i, lambda, rho);
                if let Ok(Some((j, _))) = classify_s(s, s.r0, lambda, &y) {
                    if j != i {
                        collision = Some((lambda, i, j));
                        break 'outer;
                    }
                }
                for j in 1..=s.big_n {
                    if j != i && in_s_strict(s, s.r0, lambda, &y, j) {
                        collision = Some((lambda, i, j));
                        break 'outer;
                    }
                }
            }
        }
    }
    rep.push(
        "disjoint_sets",
        collision.is_none(),
        match collision {
            None => "no sampled point of S_i lies in S_j".into(),
            Some((l, i, j)) => format!("S_{i} meets S_{j} at lambda = {l}"),
        },
    );
    rep
}

/// Membership in S_j specifically, solving only branch j.
fn in_s_strict(s: &Scenario, r: f64, lambda: f64, y: &MatrixPair, j: usize) -> bool {
    if let Some(cf) = &s.decomposer {
        return cf.invert(s, j, r, lambda, y).is_some();
    }
    let f = |x: &[f64]| (&s.zeta_raw(j, lambda, &MatrixPair::from_slice(s.m, s.n, x)) - y).to_vec();
    let out = levenberg_marquardt(&f, &alloc::vec![0.0; s.dim()], 1e-12 * (1.0 + y.norm()), 80);
    out.residual < 1e-12 * (1.0 + y.norm()) && num::norm(&out.x) < r
}

/// Piecewise-affine scalar σ: `breaks` sorted, `pieces[k] = (slope, intercept)` on the k-th interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseAffine {
    pub breaks: Vec<f64>,
    pub pieces: Vec<(f64, f64)>,
}

impl PiecewiseAffine {
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.breaks.iter().take_while(|b| t > **b).count();
        let (a, b) = self.pieces[k];
        a * t + b
    }

    pub fn into_sigma(self) -> SigmaMap {
        Arc::new(move |a: &Mat| Mat::from_rows(1, 1, &[self.eval(a.get(0, 0))]))
    }
}

/// Affine-in-ρ scenario family: `κ_i(ρ) = k0_i + ⟨k1_i, ρ⟩`, constant γ_i
/// (the last one recomputed as minus the sum).
pub struct AffineFamily {
    pub m: usize,
    pub n: usize,
    pub r0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub k0: Vec<f64>,
    pub k1: Vec<Vec<f64>>,
    pub gammas: Vec<WaveVector>,
}

impl AffineFamily {
    pub fn maps(&self) -> Result<(KappaMap, GammaMap), ScenarioError> {
        let cfg = build_tn(MatrixPair::zeros(self.m, self.n), self.gammas.clone(), alloc::vec![2.0; self.gammas.len()])?;
        let gammas = cfg.gammas;
        let k0 = self.k0.clone();
        let k1 = self.k1.clone();
        if k0.len() != gammas.len() || k1.len() != gammas.len() || k1.iter().any(|r| r.len() != 2 * self.m * self.n) {
            return Err(ScenarioError::Invalid("kappa coefficient shapes do not match N and 2mn".into()));
        }
        let kappa: KappaMap = Arc::new(move |rho: &MatrixPair| {
            let v = rho.to_vec();
            k0.iter().zip(&k1).map(|(c, g)| c + num::dot(g, &v)).collect()
        });
        let gamma: GammaMap = Arc::new(move |_rho: &MatrixPair| gammas.clone());
        Ok((kappa, gamma))
    }

    pub fn scenario(&self, name: &str, sigma: SigmaMap, decomposer: Option<Arc<dyn ClosedForm>>) -> Result<Scenario, ScenarioError> {
        let (kappa_map, gamma_map) = self.maps()?;
        Ok(Scenario {
            name: name.into(),
            m: self.m,
            n: self.n,
            big_n: self.gammas.len(),
            r0: self.r0,
            delta1: self.delta1,
            delta2: self.delta2,
            kappa_map,
            gamma_map,
            sigma,
            decomposer,
            graph_tol: GRAPH_TOL,
        })
    }
}

pub const TWO_BRANCH: &str = "two-branch";

/// σ(t) = t + 2 (t ≤ −1), −t (|t| ≤ 1), t − 2 (t ≥ 1).
pub fn two_branch_sigma() -> PiecewiseAffine {
    PiecewiseAffine { breaks: alloc::vec![-1.0, 1.0], pieces: alloc::vec![(1.0, 2.0), (-1.0, 0.0), (1.0, -2.0)] }
}

pub fn two_branch_family() -> AffineFamily {
    let g1 = WaveVector { p: alloc::vec![1.0], a: alloc::vec![1.0], b: Mat::zeros(1, 1) };
    AffineFamily {
        m: 1,
        n: 1,
        r0: 0.1,
        delta1: 0.2,
        delta2: 0.6,
        k0: alloc::vec![2.0, 3.0],
        k1: alloc::vec![alloc::vec![-1.0, 1.0], alloc::vec![1.0, -1.0]],
        gammas: alloc::vec![g1.clone(), g1.scaled(-1.0)],
    }
}

/// The scalar forward–backward scenario with N = 2.
pub fn two_branch_scenario() -> Scenario {
    two_branch_family()
        .scenario(TWO_BRANCH, two_branch_sigma().into_sigma(), Some(Arc::new(TwoBranchForm)))
        .expect("two-branch data is consistent")
}

/// Exact solvers for the two-branch scenario. Both γ's have zero flux part, so
/// the wave-cone condition forces ρ² = ρ′² = Y².
pub struct TwoBranchForm;

/// First coordinate of ζ_i(λ, (0, y2)) and of π_i((0, y2)).
fn tb_anchor(i: usize, lambda: f64, y2: f64) -> (f64, f64) {
    match i {
        1 => (lambda * (2.0 + y2), 0.0),
        _ => (lambda * (-2.0 + y2) + (1.0 - lambda), 1.0),
    }
}

fn two_branch_inverse(_s: &Scenario, i: usize, r: f64, lambda: f64, y: &MatrixPair) -> Option<MatrixPair> {
    let (y1, y2) = (y.first.get(0, 0), y.second.get(0, 0));
    let (z, _) = tb_anchor(i, lambda, y2);
    let rho1 = if lambda >= 1.0 {
        if num::abs(y1 - z) > 1e-12 * (1.0 + num::abs(y1)) {
            return None;
        }
        0.0
    } else {
        (y1 - z) / (1.0 - lambda)
    };
    let rho = MatrixPair::scalar(rho1, y2);
    (rho.norm() < r).then_some(rho)
}

impl ClosedForm for TwoBranchForm {
    fn invert(&self, s: &Scenario, i: usize, r: f64, lambda: f64, y: &MatrixPair) -> Option<MatrixPair> {
        two_branch_inverse(s, i, r, lambda, y)
    }

    fn decompose(&self, s: &Scenario, r: f64, lambda: f64, y: &MatrixPair) -> Option<Decomposition> {
        let (y1, y2) = (y.first.get(0, 0), y.second.get(0, 0));
        if !(num::abs(y2) < r) {
            return None;
        }
        let w = num::sqrt(r * r - y2 * y2);
        let at = |x: f64| MatrixPair::scalar(x, y2);
        for i in 1..=2usize {
            let (z, p) = tb_anchor(i, lambda, y2);
            let off = y1 - p;
            let dec = if num::abs(off) < w {
                Decomposition { i, lambda_prime: lambda, q: 0.0, rho: at(0.0), rho_prime: at(off) }
            } else {
                // Between the anchor and ζ_i(λ, (0, y2)), or just beyond ζ.
                let t = (y1 - p) / (z - p);
                if (0.0..=1.0).contains(&t) {
                    Decomposition { i, lambda_prime: lambda, q: t, rho: at(0.0), rho_prime: at(0.0) }
                } else if t > 1.0 {
                    let rho1 = (y1 - z) / (1.0 - lambda);
                    if !(num::abs(rho1) < w) {
                        continue;
                    }
                    Decomposition { i, lambda_prime: lambda, q: 1.0, rho: at(rho1), rho_prime: at(0.0) }
                } else {
                    continue;
                }
            };
            if dec.verify(s, r, lambda, y).is_ok() {
                return Some(dec);
            }
        }
        None
    }
}

/// User data for a scenario whose σ is defined from the corner maps.
pub struct GraphFirstSpec {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub big_n: usize,
    pub r0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub kappa_map: KappaMap,
    pub gamma_map: GammaMap,
    pub samples: usize,
    pub seed: u64,
}

/// Nearest point of the patch ξ_i¹(B̄_{r0}) to `a`, as (residual, ρ).
fn invert_patch(kappa: &KappaMap, gamma: &GammaMap, m: usize, n: usize, r0: f64, i: usize, a: &Mat) -> (f64, MatrixPair) {
    let scn_xi = |rho: &MatrixPair| {
        let k = kappa(rho)[i - 1];
        let gs = gamma(rho);
        let mut pi = rho.clone();
        for g in &gs[..i - 1] {
            pi = &pi + &g.to_pair();
        }
        pi.axpy(k, &gs[i - 1].to_pair())
    };
    let d = 2 * m * n;
    let f = |x: &[f64]| {
        let rho = MatrixPair::from_slice(m, n, x);
        let v = scn_xi(&rho);
        v.first.data.iter().zip(a.data.iter()).map(|(u, w)| u - w).collect::<Vec<f64>>()
    };
    let project = |x: &mut Vec<f64>| {
        let nx = num::norm(x);
        if nx > r0 {
            for v in x.iter_mut() {
                *v *= r0 / nx;
            }
        }
    };
    let mut x = alloc::vec![0.0; d];
    let mut fx = f(&x);
    for _ in 0..40 {
        let res = num::norm(&fx);
        if res < 1e-14 {
            break;
        }
        // Minimum-norm Gauss–Newton step (underdetermined), then project to the ball.
        let j = linalg::jacobian(&f, &x, &fx);
        let k = fx.len();
        let mut g = alloc::vec![0.0; k * k];
        for a_ in 0..k {
            for b_ in 0..k {
                g[a_ * k + b_] = (0..d).map(|c| j[a_ * d + c] * j[b_ * d + c]).sum();
            }
            g[a_ * k + a_] += 1e-14;
        }
        let Some(z) = linalg::solve(&g, &fx, k) else { break };
        let mut xn: Vec<f64> = (0..d).map(|c| x[c] - (0..k).map(|r| j[r * d + c] * z[r]).sum::<f64>()).collect();
        project(&mut xn);
        let fnew = f(&xn);
        if num::norm(&fnew) >= res {
            break;
        }
        x = xn;
        fx = fnew;
    }
    (num::norm(&fx), MatrixPair::from_slice(m, n, &x))
}

/// Scenario with σ := ξ_i² ∘ (ξ_i¹)⁻¹ on each patch and the nearest patch value elsewhere.
pub fn graph_first_scenario(spec: GraphFirstSpec) -> Result<Scenario, ScenarioError> {
    let (m, n, big_n, r0) = (spec.m, spec.n, spec.big_n, spec.r0);
    let probe = Scenario {
        name: spec.name.clone(),
        m,
        n,
        big_n,
        r0,
        delta1: spec.delta1,
        delta2: spec.delta2,
        kappa_map: spec.kappa_map.clone(),
        gamma_map: spec.gamma_map.clone(),
        sigma: Arc::new(|a: &Mat| a.clone()),
        decomposer: None,
        graph_tol: GRAPH_TOL,
    };
    let mut rng = rng::stream(spec.seed, 0x6766);
    let pts = ball_samples(&probe, r0, spec.samples.max(64), &mut rng);
    for i in 1..=big_n {
        let vals: Vec<MatrixPair> = pts.iter().map(|p| probe.xi(i, p)).collect();
        for a in 0..vals.len() {
            for b in a + 1..vals.len() {
                let d1 = num::norm(
                    &vals[a].first.data.iter().zip(vals[b].first.data.iter()).map(|(u, v)| u - v).collect::<Vec<_>>(),
                );
                let d2 = num::norm(
                    &vals[a].second.data.iter().zip(vals[b].second.data.iter()).map(|(u, v)| u - v).collect::<Vec<_>>(),
                );
                if d2 > 1e-7 && d2 > 1e6 * d1 {
                    return Err(ScenarioError::Invalid(format!(
                        "xi_{i}^1 is not injective: rho = {} and {} share xi^1 = {} but differ in xi^2",
                        pts[a], pts[b], vals[a]
                    )));
                }
            }
        }
    }
    let g = min_gap_over(&probe, &pts, |k, p| probe.xi(k, p).first.data.to_vec());
    if !(g > 1e-6) {
        return Err(ScenarioError::Invalid(format!("corner patches overlap (sampled gap {g})")));
    }
    let (km, gm) = (spec.kappa_map.clone(), spec.gamma_map.clone());
    let sigma: SigmaMap = Arc::new(move |a: &Mat| {
        let mut best = (f64::INFINITY, 1usize, MatrixPair::zeros(m, n));
        for i in 1..=big_n {
            let (res, rho) = invert_patch(&km, &gm, m, n, r0, i, a);
            if res < best.0 {
                best = (res, i, rho);
            }
        }
        let (_, i, rho) = best;
        let k = km(&rho)[i - 1];
        let gs = gm(&rho);
        let mut pi = rho.clone();
        for g in &gs[..i - 1] {
            pi = &pi + &g.to_pair();
        }
        pi.axpy(k, &gs[i - 1].to_pair()).second
    });
    Ok(Scenario { sigma, ..probe })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn sp(a: f64, b: f64) -> MatrixPair {
        MatrixPair::scalar(a, b)
    }

    #[test]
    fn two_branch_points() {
        let s = two_branch_scenario();
        let z = sp(0.0, 0.0);
        assert_eq!(s.xi(1, &z), sp(2.0, 0.0));
        assert_eq!(s.xi(2, &z), sp(-2.0, 0.0));
        assert_eq!(s.pi(2, &z), sp(1.0, 0.0));
        assert_eq!((s.sigma)(&Mat::from_rows(1, 1, &[2.0])).get(0, 0), 0.0);
        assert_eq!((s.sigma)(&Mat::from_rows(1, 1, &[-2.0])).get(0, 0), 0.0);
        assert_eq!(zeta(&s, 1, 0.7, &z).unwrap(), sp(1.4, 0.0));
        assert_eq!(zeta(&s, 2, 1.0, &z).unwrap(), s.xi(2, &z));
        assert_eq!(zeta(&s, 2, 0.0, &z).unwrap(), s.pi(2, &z));
        assert!(matches!(zeta(&s, 1, 0.5, &sp(0.2, 0.0)), Err(ScenarioError::Domain(_))));
        let b = s.branches(&sp(0.1, 0.0));
        assert!((b.kappas[0] - 1.9).abs() < 1e-15 && (b.kappas[1] - 3.1).abs() < 1e-15);
    }

    #[test]
    fn pi_decomposition_example() {
        let s = two_branch_scenario();
        let z = sp(0.0, 0.0);
        let nu = pi_decomposition(&s, 1, 1.0, &z).unwrap();
        assert!((nu[0] - 0.5).abs() < 1e-15 && (nu[1] - 0.5).abs() < 1e-15);
        assert!(pi_decomposition(&s, 1, 0.6, &z).is_err());
    }

    #[test]
    fn classify_examples() {
        let s = two_branch_scenario();
        let rho = sp(0.01, 0.05);
        let y = s.zeta_raw(1, 0.8, &rho);
        let (i, back) = classify_s(&s, s.r0, 0.8, &y).unwrap().unwrap();
        assert_eq!(i, 1);
        assert!(back.dist(&rho) < 1e-8);
        assert_eq!(classify_s(&s, s.r0, 0.8, &sp(40.0, 0.0)).unwrap(), None);
        // The generic root search agrees with the closed form.
        let (i, back) = classify_generic(&s, s.r0, 0.8, &y).unwrap().unwrap();
        assert_eq!(i, 1);
        assert!(back.dist(&rho) < 1e-8);
        assert_eq!(classify_generic(&s, s.r0, 0.8, &sp(40.0, 0.0)).unwrap(), None);
    }

    #[test]
    fn decompose_examples() {
        let s = two_branch_scenario();
        let d = decompose_sigma(&s, s.r0, 0.7, &sp(1.4, 0.0)).unwrap();
        assert_eq!((d.i, d.lambda_prime, d.q), (1, 0.7, 1.0));
        assert_eq!((d.rho.norm(), d.rho_prime.norm()), (0.0, 0.0));
        let d = decompose_sigma(&s, s.r0, 0.7, &s.pi(1, &sp(0.05, 0.0))).unwrap();
        assert_eq!(d.q, 0.0);
        assert!(decompose_sigma(&s, s.r0, 0.7, &sp(1.4, 0.5)).is_err());
        assert!(decompose_generic(&s, s.r0, 0.7, &sp(1.4, 0.5)).is_err());
        let g = decompose_generic(&s, s.r0, 0.7, &sp(1.0, 0.02)).unwrap();
        assert!(g.verify(&s, s.r0, 0.7, &sp(1.0, 0.02)).is_ok());
    }

    #[test]
    fn gaps_example() {
        let s = two_branch_scenario();
        let g = set_gaps(&s, 0.02, 0.06, 0.85, 64, 1).unwrap();
        assert!((g.d0_raw - 3.8).abs() < 1e-12);
        assert!((g.d0 - 1.9).abs() < 1e-12);
        assert!(g.d_prime > 0.0);
        // κ_2 = −1 puts ξ_2 = ξ_1 at ρ = 0.
        let mut fam = two_branch_family();
        fam.k0 = vec![2.0, -1.0];
        let bad = fam.scenario("bad", two_branch_sigma().into_sigma(), None).unwrap();
        assert!(matches!(set_gaps(&bad, 0.02, 0.06, 0.85, 32, 1), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn fit_examples() {
        let s = two_branch_scenario();
        let (r1, l1) = compactness_fit(&s, &[sp(1.4, 0.0)]).unwrap();
        assert_eq!(l1, 0.7);
        assert!((r1 - 0.002).abs() < 1e-15);
        assert_eq!(compactness_fit(&s, &[]).unwrap(), (0.002, 0.6));
        assert!(matches!(compactness_fit(&s, &[sp(2.0, 0.0)]), Err(ScenarioError::NotInSigma { index: 0, .. })));
    }

    #[test]
    fn validation_examples() {
        let s = two_branch_scenario();
        let rep = validate_scenario(&s, 1000, 7);
        assert!(rep.pass(), "{rep:?}");
        let mut low = two_branch_scenario();
        low.delta2 = 0.15;
        let rep = validate_scenario(&low, 1000, 7);
        let c = rep.checks.iter().find(|c| c.name == "disjoint_sets").unwrap();
        assert!(!c.pass);
        let at: f64 = c.detail.rsplit("= ").next().unwrap().parse().unwrap();
        assert!((at - 0.2).abs() < 0.05, "{}", c.detail);
        let mut flat = two_branch_family();
        flat.k0 = vec![1.0, 3.0];
        flat.k1 = vec![vec![0.0, 0.0], vec![1.0, -1.0]];
        let f = flat.scenario("flat", two_branch_sigma().into_sigma(), None).unwrap();
        let rep = validate_scenario(&f, 1000, 7);
        assert!(!rep.checks.iter().find(|c| c.name == "kappa_range").unwrap().pass);
    }

    fn two_branch_spec() -> GraphFirstSpec {
        let s = two_branch_scenario();
        GraphFirstSpec {
            name: "graph-first".into(),
            m: 1,
            n: 1,
            big_n: 2,
            r0: 0.1,
            delta1: 0.2,
            delta2: 0.6,
            kappa_map: s.kappa_map.clone(),
            gamma_map: s.gamma_map.clone(),
            samples: 200,
            seed: 3,
        }
    }

    #[test]
    fn graph_first_round_trip() {
        let g = graph_first_scenario(two_branch_spec()).unwrap();
        let s = two_branch_scenario();
        for k in 0..=40 {
            for t in [1.9 + 0.005 * k as f64, -2.1 + 0.005 * k as f64] {
                let a = Mat::from_rows(1, 1, &[t]);
                assert!(((g.sigma)(&a).get(0, 0) - (s.sigma)(&a).get(0, 0)).abs() < 1e-9, "t = {t}");
            }
        }
        let mut rng = rng::stream(5, 0);
        for _ in 0..5 {
            let i = 1 + rng::index(&mut rng, 2);
            let lp = rng::range(&mut rng, 0.6, 0.8);
            let rho = MatrixPair::from_slice(1, 1, &rng::in_ball(&mut rng, 2, 0.05));
            let y = g.zeta_raw(i, lp, &rho);
            let d = decompose_sigma(&g, 0.1, 0.8, &y).unwrap();
            assert!(d.reconstruct(&g).dist(&y) < 1e-8);
        }
    }

    #[test]
    fn graph_first_rejects_constant_corner() {
        let mut spec = two_branch_spec();
        // κ_1 = 2 − ρ¹ makes ξ_1¹ ≡ 2 while ξ_1² = ρ² varies.
        spec.kappa_map = Arc::new(|rho: &MatrixPair| {
            let v = rho.to_vec();
            vec![2.0 - v[0], 3.0 - v[1] + v[0]]
        });
        assert!(matches!(graph_first_scenario(spec), Err(ScenarioError::Invalid(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn witness_round_trip(i in 1usize..=2, lp in 0.6f64..0.8, q in 0.0f64..=1.0,
                              a in -0.07f64..0.07, b in -0.07f64..0.07, y2 in -0.07f64..0.07) {
            let s = two_branch_scenario();
            let rho = sp(a, y2);
            let rhop = sp(b, y2);
            let y = s.zeta_raw(i, lp, &rho).lerp(q, &s.pi(i, &rhop));
            let d = decompose_sigma(&s, s.r0, 0.8, &y).unwrap();
            prop_assert!(d.reconstruct(&s).dist(&y) <= 1e-8);
            prop_assert!(d.verify(&s, s.r0, 0.8, &y).is_ok());
            // Nesting: the same witness serves the larger set.
            prop_assert!(d.verify(&s, s.r0, 0.9, &y).is_ok());
        }

        #[test]
        fn pi_coefficients_bounded(lambda in 0.6001f64..=1.0, a in -0.07f64..0.07, b in -0.07f64..0.07) {
            let s = two_branch_scenario();
            let rho = sp(a, b);
            let nu = pi_decomposition(&s, 1, lambda, &rho).unwrap();
            let floor = (lambda - s.delta2) * s.delta1;
            prop_assert!(nu.iter().all(|v| *v >= floor - 1e-12));
            let mut acc = MatrixPair::zeros(1, 1);
            for (j, v) in nu.iter().enumerate() {
                acc = acc.axpy(*v, &s.zeta_raw(j + 1, lambda, &rho));
            }
            prop_assert!(acc.dist(&s.pi(1, &rho)) < 1e-10);
        }
    }
}
