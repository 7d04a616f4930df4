//! One stage: from `(Du, V) ∈ Σ^r(λ)` to `(Dũ, Ṽ) ∈ Σ^s(μ)` with the
//! measure, drift and `L¹` properties (a)–(g).
//!
//! The first stage covers the domain by dyadic cubes and places a step
//! template on each. Later stages work template by template: every pinned
//! plateau slot of the previous stage is tiled by cubes and each cube gets
//! the step template of its (constant) value. Transitions and unpinned
//! plateaus are left as they are and counted in `F₀`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::field::{usages, FieldTree, Fill, Integrator, Lattice, Node, Pin, Placement};
use crate::geometry::{vitali_cover, Cube, GeomError, MatrixPair};
use crate::num;
use crate::rng;
use crate::scenario::{classify_s, decompose_sigma, in_sigma, set_gaps, zeta, Decomposition, Scenario, ScenarioError};
use crate::tnconfig::corner_weights;
use crate::staircase::{slot_lattice, step_in_sigma, RegionTree, StaircaseError, Step, StepParams, Tag};

/// Pairs sampled for the Lipschitz estimate behind ℓ′.
pub const LIPSCHITZ_PAIRS: usize = 10_000;
/// Points sampled per cube class for membership and measure audits.
pub const AUDIT_SAMPLES: usize = 4000;
/// Deepest extra refinement of a slot lattice when enforcing the radius cap.
const MAX_CELL_REFINE: u32 = 40;

#[derive(Clone, Debug, PartialEq)]
pub enum StageError {
    Precondition(String),
    Scenario(ScenarioError),
    Geometry(GeomError),
    Step { what: String, err: StaircaseError },
    Bound { name: String, required: f64, achieved: f64, class: usize },
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageError::Precondition(s) => write!(f, "stage precondition violated: {s}"),
            StageError::Scenario(e) => write!(f, "{e}"),
            StageError::Geometry(e) => write!(f, "{e}"),
            StageError::Step { what, err } => write!(f, "step on {what}: {err}"),
            StageError::Bound { name, required, achieved, class } => {
                write!(f, "stage bound {name} failed on cube class {class}: achieved {achieved:e}, required {required:e}")
            }
        }
    }
}

impl From<ScenarioError> for StageError {
    fn from(e: ScenarioError) -> Self {
        StageError::Scenario(e)
    }
}

impl From<GeomError> for StageError {
    fn from(e: GeomError) -> Self {
        StageError::Geometry(e)
    }
}

/// Parameters handed to a stage by the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageInput {
    pub stage: usize,
    pub lambda: f64,
    pub mu: f64,
    pub r: f64,
    pub s_rad: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub input: StageInput,
    pub d_prime: f64,
    pub d0: f64,
    /// `[min{d′/4, ε/2}, 1 − 1/√2, persistence cap]`.
    pub caps: [f64; 3],
    pub eps_prime: f64,
    pub lipschitz: f64,
    pub ell_prime: f64,
}

/// The three upper limits on ε′: strict gap and drift, `(1 − ε′)² ≥ ½`, and
/// `(1 − ε′)³[λ/μ + (1 − λ/μ)(μ − δ₂)^{N−1}δ₁] ≥ λ/μ`.
pub fn eps_prime_caps(s: &Scenario, d_prime: f64, inp: &StageInput) -> [f64; 3] {
    let ratio = inp.lambda / inp.mu;
    let a = ratio + (1.0 - ratio) * num::powi(inp.mu - s.delta2, s.big_n as i32 - 1) * s.delta1;
    [
        (0.25 * d_prime).min(0.5 * inp.eps),
        1.0 - core::f64::consts::FRAC_1_SQRT_2,
        1.0 - num::cbrt(ratio / a),
    ]
}

/// Largest distance between sampled extreme points `ξ_i(ρ)`, `π_i(ρ)` of Σ(1).
pub fn sigma_diameter(s: &Scenario, samples: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, 0x6469);
    let d = s.dim();
    let mut pts = Vec::new();
    for k in 0..samples.max(1) {
        let v = if k == 0 { vec![0.0; d] } else { rng::on_sphere(&mut r, d, s.r0 * (1.0 - 1e-9)) };
        let rho = MatrixPair::from_slice(s.m, s.n, &v);
        let b = s.branches(&rho);
        pts.extend(b.xis);
        pts.extend(b.pis);
    }
    let mut best: f64 = 0.0;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            best = best.max(a.dist(b));
        }
    }
    best
}

/// A priori `C₀`: the larger of diam Σ(1) and the largest
/// `Σ_j w_j |ξ_j¹ − Y¹| / (μ − λ)` of a corner staircase from
/// `Y = ζ_k(λ, ρ)` on the configuration at μ, over a grid of `δ₂ ≤ λ < μ < 1`
/// and sampled ρ. Depends only on the scenario.
pub fn c0_constant(s: &Scenario, samples: usize, seed: u64) -> Result<f64, StageError> {
    let mut r = rng::stream(seed, 0x6330);
    let d = s.dim();
    let mut best = sigma_diameter(s, samples, seed);
    for si in 0..samples.max(1) {
        let v = if si == 0 { vec![0.0; d] } else { rng::in_ball(&mut r, d, s.r0 * (1.0 - 1e-9)) };
        let rho = MatrixPair::from_slice(s.m, s.n, &v);
        for a in 0..20 {
            let lambda = s.delta2 + (1.0 - s.delta2) * (a as f64 / 20.0);
            for t in [0.05, 0.5, 0.95] {
                let mu = lambda + t * (1.0 - lambda);
                let cfg = s.tn_at(mu, &rho)?;
                for k in 1..=s.big_n {
                    let y = zeta(s, k, lambda, &rho)?;
                    let w = corner_weights(&cfg, k as isize, lambda / mu);
                    let cost: f64 = (1..=s.big_n).map(|j| w[j - 1] * first_gap(cfg.xi(j as isize), &y)).sum();
                    best = best.max(cost / (mu - lambda));
                }
            }
        }
    }
    Ok(best)
}

/// Cubes of one stage that carry the same template.
#[derive(Clone, Debug)]
pub struct CubeClass {
    pub node: Arc<Node>,
    /// Largest physical side among the instances.
    pub side: f64,
    pub instances: f64,
    /// Total physical volume of the instances.
    pub volume: f64,
}

/// Where a stage acts: the whole domain (first stage), or each cube of the
/// previous stage as an independent `G`.
#[derive(Clone, Debug)]
pub enum StageDomain {
    Base,
    Classes(Vec<CubeClass>),
}

/// Estimate of the Lipschitz constant of `x ↦ (Du, V)(x)`: twice the largest
/// difference quotient over random close pairs.
pub fn lipschitz_estimate(field: &FieldTree, g: &StageDomain, pairs: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, 0x6c69);
    let n = field.n();
    let mut best: f64 = 0.0;
    let quotient = |eval: &dyn Fn(&[f64]) -> MatrixPair, side: f64, r: &mut rng::Rng| {
        let y: Vec<f64> = (0..n).map(|_| rng::range(r, -0.5, 0.5)).collect();
        let t = num::pow(10.0, rng::range(r, -6.0, -2.0));
        let dir = rng::on_sphere(r, n, 1.0);
        let z: Vec<f64> = y.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
        if z.iter().any(|v| v.abs() >= 0.5) {
            return 0.0;
        }
        eval(&y).dist(&eval(&z)) / (t * side)
    };
    match g {
        StageDomain::Base => {
            for _ in 0..pairs {
                let b = &field.domain.boxes[rng::index(&mut r, field.domain.boxes.len())];
                let eval = |y: &[f64]| field.eval(&b.from_local(y)).pair();
                best = best.max(quotient(&eval, b.side(), &mut r));
            }
        }
        StageDomain::Classes(cs) => {
            for k in 0..pairs {
                let c = &cs[k % cs.len()];
                let eval = |y: &[f64]| c.node.eval_local(y, c.side).pair;
                best = best.max(quotient(&eval, c.side, &mut r));
            }
        }
    }
    2.0 * best
}

/// ε′, ℓ′ and the gaps for one stage.
pub fn stage_params(s: &Scenario, field: &FieldTree, g: &StageDomain, inp: &StageInput, seed: u64) -> Result<StageParams, StageError> {
    if !(inp.lambda < inp.mu && inp.mu < 1.0) {
        return Err(StageError::Precondition(format!("need lambda < mu < 1, got {} and {}", inp.lambda, inp.mu)));
    }
    if !(inp.r < inp.s_rad && inp.s_rad <= s.r0) {
        return Err(StageError::Precondition(format!("need r < s <= r0, got {} and {}", inp.r, inp.s_rad)));
    }
    if !(inp.eps > 0.0 && inp.eps < 1.0) {
        return Err(StageError::Precondition(format!("eps = {} outside (0,1)", inp.eps)));
    }
    let gaps = set_gaps(s, inp.r, inp.s_rad, inp.mu, 64, seed)?;
    let caps = eps_prime_caps(s, gaps.d_prime, inp);
    let eps_prime = 0.9 * caps.iter().copied().fold(f64::INFINITY, f64::min);
    let lipschitz = lipschitz_estimate(field, g, LIPSCHITZ_PAIRS, seed);
    let diam = field.domain.diam();
    let reach = (0.25 * gaps.d_prime).min(eps_prime);
    let ell_prime = if lipschitz * diam > reach { reach / lipschitz } else { diam };
    Ok(StageParams { input: *inp, d_prime: gaps.d_prime, d0: gaps.d0, caps, eps_prime, lipschitz, ell_prime })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    AtLeast,
    AtMost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Exact,
    /// Monte Carlo with a 3σ half-width.
    MonteCarlo { ci: f64 },
    /// Every one of `count` sampled points satisfied the condition.
    Sampled { count: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub name: String,
    /// Index of the cube class (the `G` of the stage).
    pub class: usize,
    pub kind: BoundKind,
    pub required: f64,
    pub achieved: f64,
    pub method: Method,
    pub pass: bool,
}

impl BoundRecord {
    fn new(name: impl Into<String>, class: usize, kind: BoundKind, achieved: f64, required: f64, method: Method) -> Self {
        let pass = match kind {
            BoundKind::AtLeast => achieved >= required,
            BoundKind::AtMost => achieved <= required,
        };
        BoundRecord { name: name.into(), class, kind, required, achieved, method, pass }
    }
}

/// One group of stage cubes sharing a step template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeRecord {
    pub value: MatrixPair,
    /// Corner label of the value in `S^r(λ)`, 0 when only in Σ.
    pub label: usize,
    pub q: f64,
    pub side: f64,
    pub instances: f64,
    pub volume: f64,
    pub pinned_fraction: f64,
    pub sup_phi: f64,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub params: StageParams,
    pub cubes: Vec<CubeRecord>,
    pub bounds: Vec<BoundRecord>,
    pub c0_estimate: f64,
    /// Largest `‖Dũ − Du‖₁ / [|F₀| + (ε + μ − λ)|G|]` over the classes.
    pub c0_ratio: f64,
    pub f0_measure: f64,
    pub g_measure: f64,
    /// `‖Dũ − Du‖_{L¹(G)}` summed over the classes.
    pub l1_increment: f64,
    /// Pinned cells whose recorded corner disagrees with the classification.
    pub label_mismatches: usize,
    pub templates: usize,
}

impl StageReport {
    pub fn pass(&self) -> bool {
        self.bounds.iter().all(|b| b.pass)
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub field: FieldTree,
    pub report: StageReport,
    /// The cubes of this stage, grouped by template.
    pub classes: Vec<CubeClass>,
}

fn key(n: &Arc<Node>) -> usize {
    Arc::as_ptr(n) as usize
}

fn par_map<T: Send, R: Send>(items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Witness for `y ∈ Σ^r(λ)`: the q = 1 form when `y ∈ S_k^r(λ)`.
fn witness(s: &Scenario, r: f64, lambda: f64, y: &MatrixPair) -> Result<(usize, Decomposition), StageError> {
    if let Some((k, rho)) = classify_s(s, r, lambda, y)? {
        return Ok((k, Decomposition { i: k, lambda_prime: lambda, q: 1.0, rho: rho.clone(), rho_prime: rho }));
    }
    let dec = decompose_sigma(s, r, lambda, y)
        .map_err(|_| StageError::Precondition(format!("value {y} is not in Sigma^r(lambda)")))?;
    Ok((0, dec))
}

/// `|Du_first − y_first|` (Frobenius).
fn first_gap(a: &MatrixPair, y: &MatrixPair) -> f64 {
    let d: f64 = a.first.data.iter().zip(&y.first.data).map(|(p, q)| (p - q) * (p - q)).sum();
    num::sqrt(d)
}

struct Group {
    value: MatrixPair,
    label: usize,
    dec: Decomposition,
    side: f64,
}

struct Built {
    group: Group,
    step: Step,
    /// Average of `|Dũ − Y|` over the step cube.
    l1_avg: f64,
    pinned_fraction: f64,
}

fn build_steps(s: &Scenario, params: &StageParams, groups: Vec<Group>, seed: u64) -> Result<Vec<Built>, StageError> {
    let inp = params.input;
    let jobs: Vec<(usize, Group)> = groups.into_iter().enumerate().collect();
    let out = par_map(jobs, |(gi, g)| {
        let n = g.value.n();
        let cube = Cube::new(vec![0.0; n], 0.5 * g.side);
        let sp = StepParams {
            lambda: inp.lambda,
            mu: inp.mu,
            r: inp.r,
            tau: params.eps_prime,
            tag: Tag { stage: inp.stage, lambda: inp.mu },
            eps_nbhd: None,
            seed: rng::subtask(seed, gi as u64),
        };
        let step = step_in_sigma(s, &g.dec, &g.value, &cube, &sp)
            .map_err(|err| StageError::Step { what: format!("value {}", g.value), err })?;
        let y = g.value.clone();
        let f = move |p: &MatrixPair, _: Option<&Pin>| first_gap(p, &y);
        let l1_avg = Integrator::new(&f).average(&step.node);
        let pinned_fraction = step.regions.pinned() / cube.volume();
        Ok(Built { group: g, step, l1_avg, pinned_fraction })
    });
    out.into_iter().collect()
}

/// Memoized `S^r(λ)` labels of constant values.
struct Classifier<'a> {
    s: &'a Scenario,
    r: f64,
    lambda: f64,
    cache: BTreeMap<Vec<u64>, (usize, Option<MatrixPair>)>,
}

impl<'a> Classifier<'a> {
    fn new(s: &'a Scenario, r: f64, lambda: f64) -> Self {
        Classifier { s, r, lambda, cache: BTreeMap::new() }
    }

    fn get(&mut self, y: &MatrixPair) -> Result<(usize, Option<MatrixPair>), StageError> {
        let k = y.key();
        if let Some(v) = self.cache.get(&k) {
            return Ok(v.clone());
        }
        let v = match classify_s(self.s, self.r, self.lambda, y)? {
            Some((i, rho)) => (i, Some(rho)),
            None => (0, None),
        };
        self.cache.insert(k, v.clone());
        Ok(v)
    }

    fn label(&mut self, y: &MatrixPair) -> Result<usize, StageError> {
        Ok(self.get(y)?.0)
    }
}

/// Everything the bound checks need about one `G`.
struct ClassAudit {
    volume: f64,
    /// Exact measure of plateau leaves in `S_k^r(λ)`, entry `k−1`.
    old_exact: Vec<f64>,
    /// Monte Carlo measure of the remaining points in `S_k^r(λ)`.
    old_mc: Vec<f64>,
    old_ci: f64,
    /// Exact measure pinned at this stage to `S_k^r(μ)`.
    new_pinned: Vec<f64>,
    l1: f64,
    sup: f64,
    min_cube_fraction: f64,
    max_radius: f64,
    /// Samples of the new field and the first one found outside Σ^s(μ).
    sampled: usize,
    outside: usize,
}

fn f1_fraction(s: &Scenario, inp: &StageInput) -> f64 {
    0.5 * (inp.mu - inp.lambda) * num::powi(inp.mu - s.delta2, s.big_n as i32 - 1) * s.delta1
}

/// Records properties (a)–(g) for one class; returns `(|F₀|, C₀ ratio)`.
fn audit(
    s: &Scenario,
    params: &StageParams,
    class: usize,
    a: &ClassAudit,
    c0: f64,
    out: &mut Vec<BoundRecord>,
) -> (f64, f64) {
    use BoundKind::{AtLeast, AtMost};
    let inp = &params.input;
    let g = a.volume;
    let mc = Method::MonteCarlo { ci: a.old_ci };
    out.push(BoundRecord::new("a: cube radius < eps", class, AtMost, a.max_radius, inp.eps, Method::Exact));
    out.push(BoundRecord::new("a: cube radius < ell'", class, AtMost, a.max_radius, params.ell_prime, Method::Exact));
    let inside = (a.sampled - a.outside) as f64 / a.sampled.max(1) as f64;
    out.push(BoundRecord::new("b: sampled values in Sigma^s(mu)", class, AtLeast, inside, 1.0, Method::Sampled { count: a.sampled }));
    out.push(BoundRecord::new("c: sup|u' - u| < eps", class, AtMost, a.sup, inp.eps, Method::Exact));
    out.push(BoundRecord::new("d: pinned fraction of every cube", class, AtLeast, a.min_cube_fraction, 1.0 - inp.eps, Method::Exact));
    let pinned: f64 = a.new_pinned.iter().sum();
    out.push(BoundRecord::new("e: |{in S^s(mu)}| >= (1-eps)|G|", class, AtLeast, pinned, (1.0 - inp.eps) * g, Method::Exact));
    let f1 = f1_fraction(s, inp) * g;
    for k in 0..s.big_n {
        let name = format!("f: |{{in S_{}^s(mu)}}| >= (mu-lambda)(mu-delta2)^(N-1) delta1 |G| / 2", k + 1);
        out.push(BoundRecord::new(name, class, AtLeast, a.new_pinned[k], f1, Method::Exact));
        let old = a.old_exact[k] + a.old_mc[k];
        let name = format!("f: |{{in S_{}^s(mu)}}| >= (lambda/mu) |{{in S_{}^r(lambda)}}|", k + 1, k + 1);
        out.push(BoundRecord::new(name, class, AtLeast, a.new_pinned[k], inp.lambda / inp.mu * old, mc.clone()));
    }
    let in_s: f64 = a.old_exact.iter().chain(&a.old_mc).sum();
    let f0 = (g - in_s).max(0.0);
    let scale = f0 + (inp.eps + inp.mu - inp.lambda) * g;
    out.push(BoundRecord::new("g: |Du' - Du|_1 <= C0[|F0| + (eps + mu - lambda)|G|]", class, AtMost, a.l1, c0 * scale, mc));
    (f0, if scale > 0.0 { a.l1 / scale } else { 0.0 })
}

fn sample_sigma(s: &Scenario, r: f64, lambda: f64, count: usize, draw: &mut dyn FnMut() -> MatrixPair) -> usize {
    (0..count).filter(|_| !in_sigma(s, r, lambda, &draw())).count()
}

struct Construction {
    field: FieldTree,
    classes: Vec<CubeClass>,
    cubes: Vec<CubeRecord>,
    audits: Vec<ClassAudit>,
    mismatches: usize,
}

fn cube_record(b: &Built, instances: f64, volume: f64) -> CubeRecord {
    CubeRecord {
        value: b.group.value.clone(),
        label: b.group.label,
        q: b.group.dec.q,
        side: b.group.side,
        instances,
        volume,
        pinned_fraction: b.pinned_fraction,
        sup_phi: b.step.report.sup_phi,
        blocks: b.step.report.blocks,
    }
}

fn group_for(s: &Scenario, cl: &mut Classifier<'_>, y: &MatrixPair, side: f64) -> Result<Group, StageError> {
    let (label, rho) = cl.get(y)?;
    let dec = match rho {
        Some(rho) => Decomposition { i: label, lambda_prime: cl.lambda, q: 1.0, rho: rho.clone(), rho_prime: rho },
        None => witness(s, cl.r, cl.lambda, y)?.1,
    };
    Ok(Group { value: y.clone(), label, dec, side })
}

/// First stage: a dyadic cover of Ω with one step per distinct center value.
fn construct_base(s: &Scenario, field: &FieldTree, params: &StageParams, seed: u64) -> Result<Construction, StageError> {
    if !field.roots.is_empty() {
        return Err(StageError::Precondition("the whole-domain stage needs an unperturbed field".into()));
    }
    let inp = params.input;
    let max_r = params.ell_prime.min(inp.eps);
    let cubes = vitali_cover(&field.domain, max_r, 1.0 - params.eps_prime, crate::geometry::COVER_DEPTH)?;
    let mut cl = Classifier::new(s, inp.r, inp.lambda);
    let mut groups: Vec<Group> = Vec::new();
    let mut index: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let mut of_cube = Vec::with_capacity(cubes.len());
    for c in &cubes {
        let y = field.eval(&c.center).pair();
        let gi = match index.get(&y.key()) {
            Some(&gi) => gi,
            None => {
                groups.push(group_for(s, &mut cl, &y, 0.0)?);
                index.insert(y.key(), groups.len() - 1);
                groups.len() - 1
            }
        };
        groups[gi].side = groups[gi].side.max(c.side());
        of_cube.push(gi);
    }
    let built = build_steps(s, params, groups, seed)?;
    let mut new_field = field.clone();
    let mut inst = vec![0.0; built.len()];
    let mut vol = vec![0.0; built.len()];
    for (c, gi) in cubes.iter().zip(&of_cube) {
        new_field.roots.push(Placement { cube: c.clone(), node: built[*gi].step.node.clone() });
        inst[*gi] += 1.0;
        vol[*gi] += c.volume();
    }
    let n = field.n();
    let gvol = field.domain.volume();
    // The old field is constant on each cube, so its S-measures are exact.
    let mut old_exact = vec![0.0; s.big_n];
    let mut covered = 0.0;
    for (c, gi) in cubes.iter().zip(&of_cube) {
        let l = built[*gi].group.label;
        if l > 0 {
            old_exact[l - 1] += c.volume();
        }
        covered += c.volume();
    }
    let rest = (gvol - covered).max(0.0);
    if rest > 0.0 {
        let l = cl.label(&field.base.pair())?;
        if l > 0 {
            old_exact[l - 1] += rest;
        }
    }
    let mut new_pinned = vec![0.0; s.big_n];
    let mut l1 = 0.0;
    let mut sup: f64 = 0.0;
    let mut min_frac: f64 = 1.0;
    for (b, v) in built.iter().zip(&vol) {
        let cv = num::powi(b.group.side, n as i32);
        for k in 0..s.big_n {
            new_pinned[k] += b.step.regions.measure(k + 1) / cv * v;
        }
        l1 += v * b.l1_avg;
        sup = sup.max(b.step.report.sup_phi);
        min_frac = min_frac.min(b.pinned_fraction);
    }
    let mut r = rng::stream(seed, 0x6273);
    let outside = sample_sigma(s, inp.s_rad, inp.mu, AUDIT_SAMPLES, &mut || new_field.sample(&mut r).1.pair());
    let audit = ClassAudit {
        volume: gvol,
        old_exact,
        old_mc: vec![0.0; s.big_n],
        old_ci: 0.0,
        new_pinned,
        l1,
        sup,
        min_cube_fraction: min_frac,
        max_radius: cubes.iter().map(|c| c.radius).fold(0.0, f64::max),
        sampled: AUDIT_SAMPLES,
        outside,
    };
    let mut classes = Vec::new();
    let mut records = Vec::new();
    for (gi, b) in built.iter().enumerate() {
        classes.push(CubeClass { node: b.step.node.clone(), side: b.group.side, instances: inst[gi], volume: vol[gi] });
        records.push(cube_record(b, inst[gi], vol[gi]));
    }
    Ok(Construction { field: new_field, classes, cubes: records, audits: vec![audit], mismatches: 0 })
}

type Targets = BTreeMap<(usize, usize), (Lattice, usize)>;

fn rewrite(node: &Arc<Node>, targets: &Targets, built: &[Built], memo: &mut BTreeMap<usize, Arc<Node>>) -> Arc<Node> {
    if let Some(n) = memo.get(&key(node)) {
        return n.clone();
    }
    let mut out: Node = (**node).clone();
    let mut changed = false;
    for (k, slot) in out.slots.iter_mut().enumerate() {
        if let Some(f) = &mut slot.fill {
            let c = rewrite(&f.child, targets, built, memo);
            if !Arc::ptr_eq(&c, &f.child) {
                f.child = c;
                changed = true;
            }
        } else if let Some((lat, gi)) = targets.get(&(key(node), k)) {
            slot.fill = Some(Fill { lattice: lat.clone(), child: built[*gi].step.node.clone() });
            changed = true;
        }
    }
    let res = if changed { Arc::new(out) } else { node.clone() };
    memo.insert(key(node), res.clone());
    res
}

/// Cells tiling slot `k` of `node` with physical radius below `max_r`.
fn cells_for(node: &Node, k: usize, max_side: f64, max_r: f64, budget: f64) -> Result<Lattice, StageError> {
    let base = match &node.shape {
        Some(sh) if !sh.is_trivial() => {
            slot_lattice(sh, k, budget, 0).map_err(|err| StageError::Step { what: "slot tiling".into(), err })?
        }
        _ => crate::field::dyadic_lattice(node.n(), 0),
    };
    for d in 0..=MAX_CELL_REFINE {
        let lat = base.refine(d);
        if 0.5 * max_side * lat.h() < max_r {
            return Ok(lat);
        }
    }
    Err(StageError::Precondition(format!("cells of radius below {max_r:e} need more than 2^{MAX_CELL_REFINE} splits")))
}

/// Later stages: every plateau leaf in `S^r(λ)` is tiled and stepped.
fn construct_classes(
    s: &Scenario,
    field: &FieldTree,
    classes: &[CubeClass],
    params: &StageParams,
    seed: u64,
) -> Result<Construction, StageError> {
    let inp = params.input;
    let max_r = params.ell_prime.min(inp.eps);
    let roots: Vec<(Arc<Node>, f64, f64)> = classes.iter().map(|c| (c.node.clone(), c.volume, c.side)).collect();
    let ups = usages(&roots);
    let mut cl = Classifier::new(s, inp.r, inp.lambda);
    let mut groups: Vec<Group> = Vec::new();
    let mut index: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let mut targets: Targets = BTreeMap::new();
    let mut mismatches = 0;
    for u in &ups {
        for (k, slot) in u.node.slots.iter().enumerate() {
            if slot.fill.is_some() || u.node.slot_fraction(k) <= 0.0 {
                continue;
            }
            let label = cl.label(&slot.value)?;
            if let Some(p) = slot.pin {
                if p.stage + 1 == inp.stage && p.corner != label {
                    mismatches += 1;
                }
            }
            if label == 0 {
                continue;
            }
            let lat = cells_for(&u.node, k, u.max_side, max_r, params.eps_prime)?;
            let side = u.max_side * lat.h();
            let gi = match index.get(&slot.value.key()) {
                Some(&gi) => gi,
                None => {
                    groups.push(group_for(s, &mut cl, &slot.value, 0.0)?);
                    index.insert(slot.value.key(), groups.len() - 1);
                    groups.len() - 1
                }
            };
            groups[gi].side = groups[gi].side.max(side);
            targets.insert((key(&u.node), k), (lat, gi));
        }
    }
    let built = build_steps(s, params, groups, seed)?;
    let mut memo = BTreeMap::new();
    let mut new_field = field.clone();
    for p in &mut new_field.roots {
        p.node = rewrite(&p.node, &targets, &built, &mut memo);
    }
    let mut inst = vec![0.0; built.len()];
    let mut vol = vec![0.0; built.len()];
    for u in &ups {
        for k in 0..u.node.slots.len() {
            if let Some((lat, gi)) = targets.get(&(key(&u.node), k)) {
                inst[*gi] += u.instances * lat.cells() as f64;
                vol[*gi] += u.mass * lat.coverage();
            }
        }
    }
    let mut audits = Vec::with_capacity(classes.len());
    for (ci, c) in classes.iter().enumerate() {
        let new_node = rewrite(&c.node, &targets, &built, &mut memo);
        audits.push(audit_class(s, params, c, &new_node, &targets, &built, &mut cl, rng::subtask(seed, 1000 + ci as u64))?);
    }
    let mut new_classes = Vec::new();
    let mut records = Vec::new();
    for (gi, b) in built.iter().enumerate() {
        new_classes.push(CubeClass { node: b.step.node.clone(), side: b.group.side, instances: inst[gi], volume: vol[gi] });
        records.push(cube_record(b, inst[gi], vol[gi]));
    }
    Ok(Construction { field: new_field, classes: new_classes, cubes: records, audits, mismatches })
}

/// Measures of the old field on one class in each `S_k^r(λ)`: plateau
/// leaves exactly, the rest by Monte Carlo. Returns `(exact, mc, ci)`.
fn old_measures(
    s: &Scenario,
    c: &CubeClass,
    cl: &mut Classifier<'_>,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, f64), StageError> {
    let big_n = s.big_n;
    let mut exact = vec![0.0; big_n];
    for u in usages(&[(c.node.clone(), c.volume, c.side)]) {
        for (k, slot) in u.node.slots.iter().enumerate() {
            let covered = slot.fill.as_ref().map_or(0.0, |f| f.lattice.coverage());
            let frac = u.node.slot_fraction(k) - covered;
            if frac <= 0.0 {
                continue;
            }
            let label = cl.label(&slot.value)?;
            if label > 0 {
                exact[label - 1] += u.mass * frac;
            }
        }
    }
    let mut r = rng::stream(seed, 0x6d63);
    let mut hits = vec![0usize; big_n];
    for _ in 0..AUDIT_SAMPLES {
        let e = c.node.sample(c.side, &mut r);
        if e.plateau {
            continue;
        }
        if let Some((k, _)) = classify_s(s, cl.r, cl.lambda, &e.pair)? {
            hits[k - 1] += 1;
        }
    }
    let m = AUDIT_SAMPLES as f64;
    let mc: Vec<f64> = hits.iter().map(|h| *h as f64 / m * c.volume).collect();
    let p_max = hits.iter().map(|h| *h as f64 / m).fold(0.0, f64::max);
    let ci = 3.0 * num::sqrt(p_max * (1.0 - p_max) / m).max(1.0 / m) * c.volume;
    Ok((exact, mc, ci))
}

#[allow(clippy::too_many_arguments)]
fn audit_class(
    s: &Scenario,
    params: &StageParams,
    c: &CubeClass,
    new_node: &Arc<Node>,
    targets: &Targets,
    built: &[Built],
    cl: &mut Classifier<'_>,
    seed: u64,
) -> Result<ClassAudit, StageError> {
    let inp = params.input;
    let (old_exact, old_mc, old_ci) = old_measures(s, c, cl, seed)?;
    let mut l1 = 0.0;
    let mut sup: f64 = 0.0;
    let mut min_frac: f64 = 1.0;
    let mut max_radius: f64 = 0.0;
    for u in usages(&[(c.node.clone(), c.volume, c.side)]) {
        for k in 0..u.node.slots.len() {
            if let Some((lat, gi)) = targets.get(&(key(&u.node), k)) {
                let b = &built[*gi];
                l1 += u.mass * lat.coverage() * b.l1_avg;
                sup = sup.max(b.step.report.sup_phi);
                min_frac = min_frac.min(b.pinned_fraction);
                max_radius = max_radius.max(0.5 * u.max_side * lat.h());
            }
        }
    }
    let mut new_pinned = vec![0.0; s.big_n];
    for u in usages(&[(new_node.clone(), c.volume, c.side)]) {
        for (k, slot) in u.node.slots.iter().enumerate() {
            let Some(p) = slot.pin.filter(|p| p.stage == inp.stage) else { continue };
            let covered = slot.fill.as_ref().map_or(0.0, |f| f.lattice.coverage());
            new_pinned[p.corner - 1] += u.mass * (u.node.slot_fraction(k) - covered).max(0.0);
        }
    }
    let mut r = rng::stream(seed, 0x6e65);
    let outside = sample_sigma(s, inp.s_rad, inp.mu, AUDIT_SAMPLES, &mut || new_node.sample(c.side, &mut r).pair);
    Ok(ClassAudit {
        volume: c.volume,
        old_exact,
        old_mc,
        old_ci,
        new_pinned,
        l1,
        sup,
        min_cube_fraction: min_frac,
        max_radius,
        sampled: AUDIT_SAMPLES,
        outside,
    })
}

fn check_precondition(s: &Scenario, field: &FieldTree, g: &StageDomain, inp: &StageInput, seed: u64) -> Result<(), StageError> {
    let mut r = rng::stream(seed, 0x7072);
    let fail = |y: MatrixPair, at: String| {
        Err(StageError::Precondition(format!("(Du, V) = {y} at {at} is not in Sigma^r(lambda)")))
    };
    match g {
        StageDomain::Base => {
            for _ in 0..AUDIT_SAMPLES {
                let (x, v) = field.sample(&mut r);
                if !in_sigma(s, inp.r, inp.lambda, &v.pair()) {
                    return fail(v.pair(), format!("x = {x:?}"));
                }
            }
        }
        StageDomain::Classes(cs) => {
            for (ci, c) in cs.iter().enumerate() {
                for _ in 0..AUDIT_SAMPLES / cs.len().max(1) + 1 {
                    let e = c.node.sample(c.side, &mut r);
                    if !in_sigma(s, inp.r, inp.lambda, &e.pair) {
                        return fail(e.pair, format!("a point of cube class {ci}"));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Runs one stage on `g` and verifies (a)–(g) on every class.
pub fn run_stage(s: &Scenario, field: &FieldTree, g: &StageDomain, inp: &StageInput, seed: u64) -> Result<StageOutcome, StageError> {
    let params = stage_params(s, field, g, inp, seed)?;
    check_precondition(s, field, g, inp, seed)?;
    let cons = match g {
        StageDomain::Base => construct_base(s, field, &params, seed)?,
        StageDomain::Classes(cs) => construct_classes(s, field, cs, &params, seed)?,
    };
    let c0 = c0_constant(s, 16, 0)?;
    let mut bounds = Vec::new();
    let mut f0_measure = 0.0;
    let mut g_measure = 0.0;
    let mut c0_ratio: f64 = 0.0;
    let mut l1_increment = 0.0;
    for (ci, a) in cons.audits.iter().enumerate() {
        l1_increment += a.l1;
        let (f0, ratio) = audit(s, &params, ci, a, c0, &mut bounds);
        f0_measure += f0;
        g_measure += a.volume;
        c0_ratio = c0_ratio.max(ratio);
    }
    if let Some(b) = bounds.iter().find(|b| !b.pass) {
        return Err(StageError::Bound { name: b.name.clone(), required: b.required, achieved: b.achieved, class: b.class });
    }
    let report = StageReport {
        params,
        cubes: cons.cubes,
        bounds,
        c0_estimate: c0,
        c0_ratio,
        f0_measure,
        g_measure,
        l1_increment,
        label_mismatches: cons.mismatches,
        templates: cons.field.template_count(),
    };
    Ok(StageOutcome { field: cons.field, report, classes: cons.classes })
}

/// Leaves of every class, for cross-checking labels against a classification.
pub fn class_regions(classes: &[CubeClass]) -> Vec<RegionTree> {
    classes
        .iter()
        .map(|c| RegionTree::from_node(&Cube::new(vec![0.0; c.node.n()], 0.5 * c.side), &c.node))
        .collect()
}

/// Exact labels of the plateau leaves of `g`: measure in each `S_k^r(λ)` and
/// the unlabeled remainder `F₀` (transitions by Monte Carlo).
pub fn classify_domain(
    s: &Scenario,
    field: &FieldTree,
    g: &StageDomain,
    r: f64,
    lambda: f64,
    seed: u64,
) -> Result<(Vec<f64>, f64), StageError> {
    let mut cl = Classifier::new(s, r, lambda);
    let mut measures = vec![0.0; s.big_n];
    let mut total = 0.0;
    match g {
        StageDomain::Base => {
            let mut rg = rng::stream(seed, 0x6364);
            let vol = field.domain.volume();
            total = vol;
            for _ in 0..AUDIT_SAMPLES {
                let (_, v) = field.sample(&mut rg);
                let l = cl.label(&v.pair())?;
                if l > 0 {
                    measures[l - 1] += vol / AUDIT_SAMPLES as f64;
                }
            }
        }
        StageDomain::Classes(cs) => {
            for (ci, c) in cs.iter().enumerate() {
                total += c.volume;
                let (exact, mc, _) = old_measures(s, c, &mut cl, rng::subtask(seed, ci as u64))?;
                for k in 0..s.big_n {
                    measures[k] += exact[k] + mc[k];
                }
            }
        }
    }
    let f0 = (total - measures.iter().sum::<f64>()).max(0.0);
    Ok((measures, f0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AffineBase;
    use crate::geometry::{Domain, Mat};
    use crate::scenario::{two_branch_scenario, zeta};

    fn base_field(slope: f64) -> FieldTree {
        let base = AffineBase { u0: vec![0.0], grad: Mat::from_rows(1, 1, &[slope]), v: Mat::zeros(1, 1) };
        FieldTree::new(base, Domain::unit(1))
    }

    fn pinned_field(y: &MatrixPair) -> FieldTree {
        let base = AffineBase { u0: vec![0.0], grad: y.first.clone(), v: y.second.clone() };
        FieldTree::new(base, Domain::unit(1))
    }

    fn input(stage: usize) -> StageInput {
        let lambdas = [0.7, 0.85, 0.925, 0.9625];
        let rs = [0.02, 0.06, 0.08, 0.09];
        StageInput {
            stage,
            lambda: lambdas[stage - 1],
            mu: lambdas[stage],
            r: rs[stage - 1],
            s_rad: rs[stage],
            eps: 0.1 / num::powi(3.0, stage as i32),
        }
    }

    #[test]
    fn two_stages_hold_every_bound() {
        let s = two_branch_scenario();
        let f = base_field(1.4);
        let one = run_stage(&s, &f, &StageDomain::Base, &input(1), 1).unwrap();
        assert!(one.report.pass());
        assert_eq!(one.field.roots.len(), 16);
        assert!(one.report.bounds.iter().any(|b| b.name.starts_with("g:")));
        let two = run_stage(&s, &one.field, &StageDomain::Classes(one.classes.clone()), &input(2), 2).unwrap();
        assert!(two.report.pass());
        assert_eq!(two.report.label_mismatches, 0);
        assert!(two.report.l1_increment > 0.0);
        // Evaluation only changes where the new stage added a level.
        let mut r = rng::stream(9, 0);
        for _ in 0..2000 {
            let x = vec![rng::uniform(&mut r)];
            let (a, b) = (one.field.eval(&x), two.field.eval(&x));
            assert!(b.depth > a.depth || (a.du == b.du && a.v == b.v && a.u == b.u));
        }
    }

    #[test]
    fn default_stage_bounds() {
        let s = two_branch_scenario();
        let inp = StageInput { stage: 1, lambda: 0.7, mu: 0.85, r: 0.02, s_rad: 0.06, eps: 0.3 };
        let out = run_stage(&s, &base_field(1.4), &StageDomain::Base, &inp, 3).unwrap();
        assert!(out.report.pass());
        let f1: Vec<_> = out.report.bounds.iter().filter(|b| b.name.contains("(mu-lambda)")).collect();
        assert_eq!(f1.len(), 2);
        for b in f1 {
            assert!((b.required - 0.00375).abs() < 1e-12);
        }
    }

    #[test]
    fn coarse_stage_has_slack() {
        let s = two_branch_scenario();
        let inp = StageInput { stage: 1, lambda: 0.7, mu: 0.85, r: 0.02, s_rad: 0.06, eps: 0.5 };
        let out = run_stage(&s, &base_field(1.4), &StageDomain::Base, &inp, 11).unwrap();
        for b in &out.report.bounds {
            assert!(b.pass, "{}", b.name);
        }
    }

    #[test]
    fn constant_field_caps_ell_at_the_diameter() {
        let s = two_branch_scenario();
        let p = stage_params(&s, &base_field(1.4), &StageDomain::Base, &input(1), 1).unwrap();
        assert_eq!(p.lipschitz, 0.0);
        assert_eq!(p.ell_prime, 1.0);
        assert!(p.caps.iter().all(|c| *c > 0.0));
        assert!(p.eps_prime < p.caps[0] && p.eps_prime < p.caps[1] && p.eps_prime < p.caps[2]);
        assert!(num::powi(1.0 - p.eps_prime, 2) >= 0.5);
    }

    #[test]
    fn persistence_cap_vanishes_as_the_ratio_tends_to_one() {
        let s = two_branch_scenario();
        let mut prev = f64::INFINITY;
        for k in 1..12 {
            let gap = num::powi(0.5, k);
            let inp = StageInput { stage: 1, lambda: 0.9 - gap * 0.2, mu: 0.9, r: 0.02, s_rad: 0.06, eps: 0.3 };
            let cap = eps_prime_caps(&s, 1.0, &inp)[2];
            assert!(cap > 0.0 && cap < prev);
            prev = cap;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn bad_stage_inputs_are_rejected() {
        let s = two_branch_scenario();
        let f = base_field(1.4);
        let mut inp = input(1);
        inp.mu = 0.6;
        assert!(matches!(stage_params(&s, &f, &StageDomain::Base, &inp, 1), Err(StageError::Precondition(_))));
        let mut inp = input(1);
        inp.s_rad = 0.2;
        assert!(matches!(stage_params(&s, &f, &StageDomain::Base, &inp, 1), Err(StageError::Precondition(_))));
    }

    #[test]
    fn corner_value_fails_the_precondition() {
        let s = two_branch_scenario();
        let err = run_stage(&s, &base_field(2.0), &StageDomain::Base, &input(1), 1).unwrap_err();
        assert!(matches!(err, StageError::Precondition(_)), "{err}");
    }

    #[test]
    fn classify_pinned_and_outside_fields() {
        let s = two_branch_scenario();
        let y = zeta(&s, 1, 0.7, &MatrixPair::zeros(1, 1)).unwrap();
        let f = pinned_field(&y);
        let (m, f0) = classify_domain(&s, &f, &StageDomain::Base, 0.02, 0.7, 1).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12 && m[1] == 0.0 && f0 < 1e-12);
        let (m, f0) = classify_domain(&s, &f, &StageDomain::Base, 0.02, 0.9, 1).unwrap();
        assert!(m.iter().all(|v| *v == 0.0));
        assert!((f0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pinned_field_persists_at_nearby_mu() {
        let s = two_branch_scenario();
        let y = zeta(&s, 1, 0.8, &MatrixPair::zeros(1, 1)).unwrap();
        let inp = StageInput { stage: 1, lambda: 0.8, mu: 0.81, r: 0.02, s_rad: 0.06, eps: 0.3 };
        let out = run_stage(&s, &pinned_field(&y), &StageDomain::Base, &inp, 5).unwrap();
        let b = out.report.bounds.iter().find(|b| b.name.contains("S_1^s(mu)}| >= (lambda/mu)")).unwrap();
        assert!(b.pass);
        assert!((b.required - 0.8 / 0.81).abs() < 1e-9);
        assert!(b.achieved >= 0.8 / 0.81);
    }

    #[test]
    fn a_priori_c0_dominates_the_diameter() {
        let s = two_branch_scenario();
        let c0 = c0_constant(&s, 16, 0).unwrap();
        assert!(c0 >= sigma_diameter(&s, 16, 0));
        assert_eq!(c0, c0_constant(&s, 16, 0).unwrap());
    }
}
