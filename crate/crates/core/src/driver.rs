//! The full construction: the schedule `λ_ν, r_ν, ε_ν`, the stage loop and
//! the checks run on the result (L¹ increments, drift, graph residual,
//! measure persistence, oscillation probes, weak divergence).

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::blocks::gauss8_points;
use crate::field::{usages, AffineBase, FieldTree, Node, Pin};
use crate::geometry::{Cube, Domain, GeomError, MatrixPair};
use crate::num;
use crate::rng;
use crate::scenario::{classify_s, compactness_fit, in_sigma, set_gaps, Scenario, ScenarioError};
use crate::stage::{run_stage, BoundKind, CubeClass, Method, StageDomain, StageError, StageInput, StageReport};

#[derive(Clone, Debug, PartialEq)]
pub enum DriverError {
    /// Schedule or option out of range.
    Config(String),
    Scenario(ScenarioError),
    Precondition(String),
    Stage { stage: usize, err: StageError },
}

impl fmt::Display for DriverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverError::Config(s) => write!(f, "invalid run parameters: {s}"),
            DriverError::Scenario(e) => write!(f, "{e}"),
            DriverError::Precondition(s) => write!(f, "precondition violated: {s}"),
            DriverError::Stage { stage, err } => write!(f, "stage {stage}: {err}"),
        }
    }
}

impl From<ScenarioError> for DriverError {
    fn from(e: ScenarioError) -> Self {
        DriverError::Scenario(e)
    }
}

impl From<GeomError> for DriverError {
    fn from(e: GeomError) -> Self {
        DriverError::Config(format!("{e}"))
    }
}

/// `λ_{ν+1} = (1 + λ_ν)/2`, `r_{ν+1} = (r₀ + r_ν)/2`, `ε_ν = δ/3^ν`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub delta: f64,
    /// `λ_1, …, λ_{K+1}`.
    pub lambda: Vec<f64>,
    /// `r_1, …, r_{K+1}`.
    pub r: Vec<f64>,
    /// `ε_1, …, ε_K`.
    pub eps: Vec<f64>,
    pub k: usize,
}

impl Schedule {
    /// Inputs of stage `nu` (1-based).
    pub fn input(&self, nu: usize) -> StageInput {
        StageInput {
            stage: nu,
            lambda: self.lambda[nu - 1],
            mu: self.lambda[nu],
            r: self.r[nu - 1],
            s_rad: self.r[nu],
            eps: self.eps[nu - 1],
        }
    }

    /// `ε_1 + ⋯ + ε_nu`.
    pub fn eps_sum(&self, nu: usize) -> f64 {
        self.eps.iter().take(nu).sum()
    }
}

pub fn make_schedule(delta: f64, lambda1: f64, r1: f64, r0: f64, k: usize) -> Result<Schedule, DriverError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DriverError::Config(format!("delta = {delta} outside (0,1)")));
    }
    if !(0.0..1.0).contains(&lambda1) {
        return Err(DriverError::Config(format!("lambda1 = {lambda1} outside [0,1)")));
    }
    if !(r1 > 0.0 && r1 < r0) {
        return Err(DriverError::Config(format!("need 0 < r1 < r0, got r1 = {r1}, r0 = {r0}")));
    }
    let mut lambda = vec![lambda1];
    let mut r = vec![r1];
    let mut eps = Vec::with_capacity(k);
    for nu in 1..=k {
        lambda.push(0.5 * (1.0 + lambda[nu - 1]));
        r.push(0.5 * (r0 + r[nu - 1]));
        eps.push(delta / num::powi(3.0, nu as i32));
    }
    Ok(Schedule { delta, lambda, r, eps, k })
}

/// One checked quantity of the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub stage: usize,
    pub kind: BoundKind,
    pub required: f64,
    pub achieved: f64,
    #[serde(flatten)]
    pub method: Method,
    pub pass: bool,
}

impl Row {
    fn new(name: impl Into<String>, stage: usize, kind: BoundKind, achieved: f64, required: f64, method: Method) -> Self {
        let pass = match kind {
            BoundKind::AtLeast => achieved >= required,
            BoundKind::AtMost => achieved <= required,
        };
        Row { name: name.into(), stage, kind, required, achieved, method, pass }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphRow {
    pub stage: usize,
    /// `∫_Ω |σ(Du_ν) − V_ν|`.
    pub l1: f64,
    /// `Ĉ[(1 − λ_{ν+1}) + ε_ν]|Ω|` with the fixed `Ĉ`.
    pub bound: f64,
    /// Largest `|σ(Du) − V| / (1 − λ_pin)` over pinned samples.
    pub c_hat_empirical: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistenceRow {
    pub q: usize,
    pub p: usize,
    /// Stage-`q` cube class.
    pub class: usize,
    pub instances: f64,
    pub k: usize,
    /// Exact pinned fraction of each cube in `S_k^{r_{p+1}}(λ_{p+1})`.
    pub fraction: f64,
    /// Monte Carlo fraction of the same set.
    pub mc_fraction: f64,
    pub mc_ci: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WildnessReport {
    pub probes: usize,
    pub samples: usize,
    pub radius: f64,
    pub d0: f64,
    pub passed: usize,
    /// Probes below the finest stage cube radius.
    pub scale_limited: usize,
    pub min_spread: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakDivReport {
    pub tests: usize,
    pub depth: u32,
    pub max_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub schedule: Schedule,
    /// `(r, λ)` of the smallest grid set `Σ^r(λ)` holding the base values.
    pub base_fit: (f64, f64),
    pub stages: Vec<StageReport>,
    pub increment_l1: Vec<Row>,
    pub linf_drift: Vec<Row>,
    pub boundary: Vec<Row>,
    pub graph_l1: Vec<GraphRow>,
    pub graph_decreasing: bool,
    pub persistence: Vec<PersistenceRow>,
    pub wildness: WildnessReport,
    pub weak_div: WeakDivReport,
}

impl RunReport {
    /// Every recorded bound holds. The oscillation probe is a measured
    /// fraction against the λ = 1 gap, so it is reported but not part of
    /// the verdict.
    pub fn pass(&self) -> bool {
        self.stages.iter().all(StageReport::pass)
            && self.increment_l1.iter().all(|r| r.pass)
            && self.linf_drift.iter().all(|r| r.pass)
            && self.boundary.iter().all(|r| r.pass)
            && self.graph_l1.iter().all(|r| r.pass)
            && self.graph_decreasing
            && self.persistence.iter().all(|r| r.pass)
    }
}

/// Knobs of the verification battery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// `Ĉ` in the graph bound.
    pub c_hat: f64,
    pub probes: usize,
    pub probe_samples: usize,
    /// Probe radius; the largest stage-1 cube radius when unset.
    pub probe_radius: Option<f64>,
    pub weak_tests: usize,
    pub quad_depth: u32,
    pub mc_samples: usize,
    pub boundary_samples: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            c_hat: 2.0,
            probes: 100,
            probe_samples: 512,
            probe_radius: None,
            weak_tests: 8,
            quad_depth: 10,
            mc_samples: 4000,
            boundary_samples: 256,
        }
    }
}

/// Result of [`run_construction`]: the final field, the report, and the
/// field after each stage (index 0 is the base).
#[derive(Clone, Debug)]
pub struct Construction {
    pub field: FieldTree,
    pub history: Vec<FieldTree>,
    pub report: RunReport,
}

/// Exact measure, per corner, of the slots of `node` pinned at `stage`
/// (over the unit box).
pub fn pinned_fractions(node: &Arc<Node>, stage: usize, big_n: usize) -> Vec<f64> {
    let mut out = vec![0.0; big_n];
    for u in usages(&[(node.clone(), 1.0, 1.0)]) {
        for (k, slot) in u.node.slots.iter().enumerate() {
            let Some(p) = slot.pin.filter(|p| p.stage == stage) else { continue };
            let covered = slot.fill.as_ref().map_or(0.0, |f| f.lattice.coverage());
            out[p.corner - 1] += u.mass * (u.node.slot_fraction(k) - covered).max(0.0);
        }
    }
    out
}

/// `½ (λ_{q+2}/λ_{p+1})(λ_{q+2} − λ_{q+1})(λ_{q+2} − δ₂)^{N−1} δ₁`.
pub fn persistence_bound(s: &Scenario, sched: &Schedule, q: usize, p: usize) -> f64 {
    let l = |nu: usize| sched.lambda[nu - 1];
    0.5 * l(q + 2) / l(p + 1) * (l(q + 2) - l(q + 1)) * num::powi(l(q + 2) - s.delta2, s.big_n as i32 - 1) * s.delta1
}

/// Rows of the persistence table for stage-`q` classes at a later stage
/// `p`; `nodes[c]` is the template of class `c` after stage `p`.
#[allow(clippy::too_many_arguments)]
pub fn persistence_check(
    s: &Scenario,
    sched: &Schedule,
    q: usize,
    p: usize,
    classes: &[CubeClass],
    nodes: &[Arc<Node>],
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<PersistenceRow>, DriverError> {
    if !(p > q && q >= 1 && p <= sched.k && q + 2 <= sched.lambda.len()) {
        return Err(DriverError::Config(format!("persistence needs 1 <= q < p <= K, got q = {q}, p = {p}")));
    }
    let bound = persistence_bound(s, sched, q, p);
    let (r, lambda) = (sched.r[p], sched.lambda[p]);
    let mut rows = Vec::new();
    for (ci, (c, node)) in classes.iter().zip(nodes).enumerate() {
        let exact = pinned_fractions(node, p, s.big_n);
        let mut hits = vec![0usize; s.big_n];
        let mut rg = rng::stream(seed, 0x7065_0000 + ci as u64);
        for _ in 0..mc_samples {
            let e = node.sample(c.side, &mut rg);
            if let Some((k, _)) = classify_s(s, r, lambda, &e.pair)? {
                hits[k - 1] += 1;
            }
        }
        let m = mc_samples.max(1) as f64;
        for k in 0..s.big_n {
            let f = hits[k] as f64 / m;
            rows.push(PersistenceRow {
                q,
                p,
                class: ci,
                instances: c.instances,
                k: k + 1,
                fraction: exact[k],
                mc_fraction: f,
                mc_ci: 3.0 * num::sqrt(f * (1.0 - f) / m).max(1.0 / m),
                bound,
                pass: exact[k] >= bound,
            });
        }
    }
    Ok(rows)
}

/// Probes `Du` on random boxes of the given radius for two samples at
/// distance at least `d0`.
pub fn wildness_probe(field: &FieldTree, probes: usize, samples: usize, radius: f64, finest: f64, d0: f64, seed: u64) -> WildnessReport {
    let mut rg = rng::stream(seed, 0x7769);
    let n = field.n();
    let mut passed = 0;
    let mut min_spread = f64::INFINITY;
    for _ in 0..probes {
        let b = &field.domain.boxes[rng::index(&mut rg, field.domain.boxes.len())];
        let slack = (b.radius - radius).max(0.0);
        let center: Vec<f64> = (0..n).map(|i| b.center[i] + rng::range(&mut rg, -slack, slack)).collect();
        let probe = Cube::new(center, radius);
        let pts: Vec<_> = (0..samples).filter_map(|_| field.sample_in_box(&probe, &mut rg)).map(|v| v.du).collect();
        let mut spread: f64 = 0.0;
        'outer: for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                let d: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
                spread = spread.max(num::sqrt(d));
                if spread >= d0 {
                    break 'outer;
                }
            }
        }
        if spread >= d0 {
            passed += 1;
        }
        min_spread = min_spread.min(spread);
    }
    WildnessReport {
        probes,
        samples,
        radius,
        d0,
        passed,
        scale_limited: if radius < finest { probes } else { 0 },
        min_spread: if probes == 0 { 0.0 } else { min_spread },
        fraction: if probes == 0 { 1.0 } else { passed as f64 / probes as f64 },
    }
}

fn bump(t: f64) -> (f64, f64) {
    if t.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let w = 1.0 - t * t;
    let v = num::exp(-1.0 / w);
    (v, v * (-2.0 * t / (w * w)))
}

/// Tensor-product Gauss points on a `2^depth` grid of `b`, one axis at a time.
fn quad_points(b: &Cube, depth: u32, f: &mut dyn FnMut(&[f64], f64)) {
    let n = b.dim();
    let cells = 1u64 << depth;
    let h = b.side() / cells as f64;
    let mut idx = vec![0u64; n];
    loop {
        let axes: Vec<[(f64, f64); 8]> =
            (0..n).map(|i| gauss8_points(b.lo(i) + idx[i] as f64 * h, b.lo(i) + (idx[i] + 1) as f64 * h)).collect();
        let mut k = vec![0usize; n];
        loop {
            let x: Vec<f64> = (0..n).map(|i| axes[i][k[i]].0).collect();
            let w: f64 = (0..n).map(|i| axes[i][k[i]].1).product();
            f(&x, w);
            let mut i = 0;
            while i < n {
                k[i] += 1;
                if k[i] < 8 {
                    break;
                }
                k[i] = 0;
                i += 1;
            }
            if i == n {
                break;
            }
        }
        let mut i = 0;
        while i < n {
            idx[i] += 1;
            if idx[i] < cells {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
        if i == n {
            return;
        }
    }
}

/// Largest `|∫⟨V, Dφ⟩| / ‖Dφ‖₁` over random bump tests `φ`.
pub fn weak_div_residual(field: &FieldTree, tests: usize, depth: u32, seed: u64) -> WeakDivReport {
    let mut rg = rng::stream(seed, 0x7764);
    let n = field.n();
    let m = field.base.grad.rows;
    let mut worst: f64 = 0.0;
    for _ in 0..tests {
        let b = &field.domain.boxes[rng::index(&mut rg, field.domain.boxes.len())];
        let rad = b.radius * rng::range(&mut rg, 0.2, 0.9);
        let center: Vec<f64> = (0..n).map(|i| b.center[i] + rng::range(&mut rg, -(b.radius - rad), b.radius - rad)).collect();
        let dir = rng::on_sphere(&mut rg, m, 1.0);
        let support = Cube::new(center.clone(), rad);
        let mut pairing = 0.0;
        let mut norm = 0.0;
        quad_points(&support, depth, &mut |x, w| {
            let t: Vec<(f64, f64)> = (0..n).map(|i| bump((x[i] - center[i]) / rad)).collect();
            let v = field.eval(x).v;
            let mut grad_norm = 0.0;
            for j in 0..n {
                let d: f64 = (0..n).map(|i| if i == j { t[i].1 / rad } else { t[i].0 }).product();
                for (a, &e) in dir.iter().enumerate() {
                    pairing += w * v.get(a, j) * e * d;
                    grad_norm += (e * d) * (e * d);
                }
            }
            norm += w * num::sqrt(grad_norm);
        });
        if norm > 0.0 {
            worst = worst.max(pairing.abs() / norm);
        }
    }
    WeakDivReport { tests, depth, max_residual: worst }
}

/// `∫_Ω |σ(Du) − V|` and the empirical `Ĉ` over pinned samples.
pub fn graph_l1(s: &Scenario, field: &FieldTree, samples: usize, seed: u64) -> (f64, f64) {
    let sigma = s.sigma.clone();
    let gap = move |p: &MatrixPair| {
        let d = sigma(&p.first);
        let v: f64 = d.data.iter().zip(&p.second.data).map(|(a, b)| (a - b) * (a - b)).sum();
        num::sqrt(v)
    };
    let l1 = field.integral(&|p: &MatrixPair, _: Option<&Pin>| gap(p));
    let mut rg = rng::stream(seed, 0x6763);
    let mut c_hat: f64 = 0.0;
    for _ in 0..samples {
        let (_, v) = field.sample(&mut rg);
        if let Some(pin) = v.pin {
            if pin.lambda < 1.0 {
                c_hat = c_hat.max(gap(&v.pair()) / (1.0 - pin.lambda));
            }
        }
    }
    (l1, c_hat)
}

/// Evaluates root templates exactly on the faces of their cubes that lie on
/// `∂Ω` and compares with the base data.
fn boundary_rows(field: &FieldTree, base: &FieldTree, stage: usize, samples: usize, seed: u64) -> Row {
    let mut rg = rng::stream(seed, 0x6264);
    let n = field.n();
    let mut faces = Vec::new();
    for (ri, p) in field.roots.iter().enumerate() {
        for axis in 0..n {
            for hi in [false, true] {
                let mut out = p.cube.center.clone();
                out[axis] += if hi { 1.0 } else { -1.0 } * p.cube.radius * (1.0 + 1e-9);
                if !field.domain.contains(&out) {
                    faces.push((ri, axis, hi));
                }
            }
        }
    }
    let mut worst: f64 = 0.0;
    let count = if faces.is_empty() { 0 } else { samples };
    let y0 = base.base.pair();
    for _ in 0..count {
        let (ri, axis, hi) = faces[rng::index(&mut rg, faces.len())];
        let p = &field.roots[ri];
        let mut y: Vec<f64> = (0..n).map(|_| rng::range(&mut rg, -0.5, 0.5)).collect();
        y[axis] = if hi { 0.5 } else { -0.5 };
        let e = p.node.eval_local(&y, p.cube.side());
        worst = e.u.iter().map(|v| v.abs()).fold(worst, f64::max);
        worst = worst.max(e.pair.dist(&y0));
    }
    Row::new("(u, Du, V) equal the base data on the boundary", stage, BoundKind::AtMost, worst, 0.0, Method::Sampled { count })
}

fn sampled_drift(field: &FieldTree, base: &AffineBase, samples: usize, seed: u64) -> f64 {
    let mut rg = rng::stream(seed, 0x6472);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let (x, v) = field.sample(&mut rg);
        let b = base.u(&x);
        worst = v.u.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    worst
}

/// Runs `K` stages from `(ū, V̄)` on Ω and the verification battery.
pub fn run_construction(
    s: &Scenario,
    base: AffineBase,
    omega: Domain,
    sched: &Schedule,
    opts: &RunOptions,
    seed: u64,
) -> Result<Construction, DriverError> {
    if base.grad.rows != s.m || base.grad.cols != s.n || base.v.rows != s.m || base.v.cols != s.n || omega.dim() != s.n {
        return Err(DriverError::Config(format!("base data and domain must be {}x{} over R^{}", s.m, s.n, s.n)));
    }
    let y = base.pair();
    // Constant V̄ is divergence-free; only the Σ(1) hypothesis needs checking.
    let base_fit = compactness_fit(s, core::slice::from_ref(&y)).map_err(|e| DriverError::Precondition(format!("{e}")))?;
    if sched.k > 0 && !in_sigma(s, sched.r[0], sched.lambda[0], &y) {
        return Err(DriverError::Precondition(format!(
            "base value {y} is not in Sigma^r1(lambda1) for r1 = {}, lambda1 = {} (smallest fit r = {}, lambda = {})",
            sched.r[0], sched.lambda[0], base_fit.0, base_fit.1
        )));
    }
    let field0 = FieldTree::new(base.clone(), omega);
    let vol = field0.domain.volume();
    let mut history = vec![field0.clone()];
    let mut stages = Vec::new();
    let mut field = field0.clone();
    let mut domain = StageDomain::Base;
    // Root index of one instance of every stage-1 class.
    let mut first_classes: Vec<(CubeClass, usize)> = Vec::new();
    let mut finest = field0.domain.diam();
    for nu in 1..=sched.k {
        let inp = sched.input(nu);
        let out = run_stage(s, &field, &domain, &inp, rng::subtask(seed, nu as u64))
            .map_err(|err| DriverError::Stage { stage: nu, err })?;
        if nu == 1 {
            for c in &out.classes {
                let idx = out.field.roots.iter().position(|p| Arc::ptr_eq(&p.node, &c.node)).unwrap_or(0);
                first_classes.push((c.clone(), idx));
            }
        }
        finest = out.classes.iter().map(|c| 0.5 * c.side).fold(finest, f64::min);
        field = out.field;
        history.push(field.clone());
        stages.push(out.report);
        domain = StageDomain::Classes(out.classes);
    }

    let mut increment_l1 = Vec::new();
    let mut linf_drift = Vec::new();
    let mut boundary = Vec::new();
    let mut graph = Vec::new();
    for nu in 1..=sched.k {
        let rep = &stages[nu - 1];
        let (lam, mu, eps) = (sched.lambda[nu - 1], sched.lambda[nu], sched.eps[nu - 1]);
        let required = if nu == 1 {
            rep.c0_estimate * (rep.f0_measure + (eps + mu - lam) * vol)
        } else {
            rep.c0_estimate * (2.0 * sched.eps[nu - 2] + eps + (mu - lam)) * vol
        };
        increment_l1.push(Row::new("|Du_nu - Du_(nu-1)|_1", nu, BoundKind::AtMost, rep.l1_increment, required, Method::Exact));
        let f = &history[nu];
        let drift = f.sup_drift();
        linf_drift.push(Row::new("sup|u_nu - u_bar| (amplitude bound)", nu, BoundKind::AtMost, drift, sched.eps_sum(nu), Method::Exact));
        boundary.push(boundary_rows(f, &field0, nu, opts.boundary_samples, rng::subtask(seed, 100 + nu as u64)));
        let (l1, c_hat) = graph_l1(s, f, opts.mc_samples, rng::subtask(seed, 200 + nu as u64));
        let bound = opts.c_hat * ((1.0 - mu) + eps) * vol;
        graph.push(GraphRow { stage: nu, l1, bound, c_hat_empirical: c_hat, pass: l1 <= bound });
    }
    if sched.k > 0 {
        let drift = field.sup_drift();
        linf_drift.push(Row::new("sup|u_K - u_bar| < delta/2", sched.k, BoundKind::AtMost, drift, 0.5 * sched.delta, Method::Exact));
        let sampled = sampled_drift(&field, &base, opts.mc_samples, rng::subtask(seed, 300));
        let count = opts.mc_samples;
        linf_drift.push(Row::new("sampled |u_K - u_bar| < delta/2", sched.k, BoundKind::AtMost, sampled, 0.5 * sched.delta, Method::Sampled { count }));
    }
    let (l1_0, _) = graph_l1(s, &field0, 0, seed);
    let mut prev = l1_0;
    let mut graph_decreasing = true;
    for g in &graph {
        graph_decreasing &= g.l1 < prev;
        prev = g.l1;
    }

    let mut persistence = Vec::new();
    for p in 2..=sched.k {
        let classes: Vec<CubeClass> = first_classes.iter().map(|(c, _)| c.clone()).collect();
        let nodes: Vec<Arc<Node>> = first_classes.iter().map(|(_, i)| history[p].roots[*i].node.clone()).collect();
        persistence.extend(persistence_check(s, sched, 1, p, &classes, &nodes, opts.mc_samples, rng::subtask(seed, 400 + p as u64))?);
    }

    let d0 = if sched.k > 0 {
        set_gaps(s, sched.r[sched.k - 1], sched.r[sched.k], sched.lambda[sched.k], 64, seed)?.d0_raw
    } else {
        0.0
    };
    let radius = opts.probe_radius.unwrap_or_else(|| {
        first_classes.iter().map(|(c, _)| 0.5 * c.side).fold(0.0, f64::max)
    });
    let probes = if sched.k > 0 { opts.probes } else { 0 };
    let wildness = wildness_probe(&field, probes, opts.probe_samples, radius, finest, d0, rng::subtask(seed, 500));
    let weak_div = weak_div_residual(&field, opts.weak_tests, opts.quad_depth, rng::subtask(seed, 600));
    let report = RunReport {
        scenario: s.name.clone(),
        seed,
        schedule: sched.clone(),
        base_fit,
        stages,
        increment_l1,
        linf_drift,
        boundary,
        graph_l1: graph,
        graph_decreasing,
        persistence,
        wildness,
        weak_div,
    };
    Ok(Construction { field, history, report })
}
