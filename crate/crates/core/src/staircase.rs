//! Corner staircases and the step that pushes a point of Σ^r(λ) into Σ^r(μ).
//!
//! A staircase is a chain of blocks: the split `η → {ξ_i, π_i}` followed by ℓ
//! rounds of `π_{k+1} → {ξ_k, π_k}` for descending `k`. Each corner slot is
//! pinned; each `π_k` slot is tiled by the next block of the chain.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::blocks::{make_block_seeded, BlockError, BlockShape};
use crate::field::{plateau_lattice, usages, Fill, Lattice, Node, Pin};
use crate::geometry::{Cube, MatrixPair, WaveVector};
use crate::num;
use crate::rng;
use crate::scenario::{boundary_distance, in_s, in_sigma, sigma_member, Decomposition, Scenario, ScenarioError};
use crate::tnconfig::{corner_weights, slot, tn_distance, TNConfig};

/// Points sampled to check containment of a finished staircase or step.
pub const VERIFY_SAMPLES: usize = 2000;
/// Deepest lattice refinement tried when tiling a two-dimensional slot.
const MAX_REFINE: u32 = 24;

#[derive(Clone, Debug, PartialEq)]
pub enum StaircaseError {
    Precondition(String),
    Block { level: usize, err: BlockError },
    /// The block direction is not axis-aligned, so its slots cannot be tiled.
    Oblique { level: usize },
    Scenario(ScenarioError),
    Bound { what: String, measured: f64, required: f64 },
}

impl fmt::Display for StaircaseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StaircaseError::Precondition(s) => write!(f, "precondition violated: {s}"),
            StaircaseError::Block { level, err } => write!(f, "block {level}: {err}"),
            StaircaseError::Oblique { level } => {
                write!(f, "block {level} has an oblique direction or n > 2; slots cannot be tiled")
            }
            StaircaseError::Scenario(e) => write!(f, "{e}"),
            StaircaseError::Bound { what, measured, required } => {
                write!(f, "bound violated: {what} (measured {measured:e}, required {required:e})")
            }
        }
    }
}

impl From<ScenarioError> for StaircaseError {
    fn from(e: ScenarioError) -> Self {
        StaircaseError::Scenario(e)
    }
}

/// Labels carried into the pins of a construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tag {
    pub stage: usize,
    /// Parameter at which pinned values lie in `S_j`.
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaircasePlan {
    pub cfg: TNConfig,
    pub i: usize,
    pub lambda: f64,
    pub delta: f64,
    pub ell: u32,
    pub eps_inner: f64,
    pub tau: f64,
}

impl StaircasePlan {
    /// Number of blocks in the chain, the split included.
    pub fn blocks(&self) -> usize {
        1 + self.ell as usize * self.cfg.len()
    }
}

/// Rounds ℓ and per-block tolerance for a staircase of accuracy `delta`.
pub fn plan_staircase(cfg: &TNConfig, i: usize, lambda: f64, delta: f64) -> Result<StaircasePlan, StaircaseError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(StaircaseError::Precondition(format!("delta = {delta} outside (0,1)")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(StaircaseError::Precondition(format!("lambda = {lambda} outside [0,1]")));
    }
    if i == 0 || i > cfg.len() {
        return Err(StaircaseError::Precondition(format!("corner {i} outside 1..={}", cfg.len())));
    }
    let tau = cfg.tau();
    let target = num::sqrt(1.0 - delta);
    let mut ell = 1u32;
    while 1.0 - num::powi(tau, ell as i32) < target {
        ell += 1;
    }
    let steps = 1.0 + (ell as f64) * cfg.len() as f64;
    let mut eps = 0.5;
    while !(steps * eps < delta && num::pow(1.0 - eps, steps) >= target) {
        eps *= 0.5;
    }
    Ok(StaircasePlan { cfg: cfg.clone(), i, lambda, delta, ell, eps_inner: eps, tau })
}

/// A flat region of the box: every instance of one template slot that is
/// not covered by finer cells. Measures are exact slab arithmetic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionLeaf {
    /// Position of the template in parent-first order.
    pub template: usize,
    pub slot: usize,
    pub stage: usize,
    /// Corner label `j` (1-based), or 0 when unpinned.
    pub label: usize,
    pub value: MatrixPair,
    /// Physical measure summed over all instances.
    pub measure: f64,
    pub instances: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionTree {
    pub root: Cube,
    pub leaves: Vec<RegionLeaf>,
    /// Measure not on any plateau (block transitions and cutoff margins).
    pub transition: f64,
}

impl RegionTree {
    /// Leaves of the template DAG rooted at `node`, placed on `root`.
    pub fn from_node(root: &Cube, node: &Arc<Node>) -> RegionTree {
        let vol = root.volume();
        let mut leaves = Vec::new();
        let mut plateau = 0.0;
        for (t, u) in usages(&[(node.clone(), vol, root.side())]).iter().enumerate() {
            for (k, s) in u.node.slots.iter().enumerate() {
                let covered = s.fill.as_ref().map_or(0.0, |f| f.lattice.coverage());
                let frac = u.node.slot_fraction(k) - covered;
                if frac <= 0.0 {
                    continue;
                }
                let measure = u.mass * frac;
                plateau += measure;
                leaves.push(RegionLeaf {
                    template: t,
                    slot: k,
                    stage: s.pin.map_or(u.node.stage, |p| p.stage),
                    label: s.pin.map_or(0, |p| p.corner),
                    value: s.value.clone(),
                    measure,
                    instances: u.instances,
                });
            }
        }
        let transition = (vol - plateau).max(0.0);
        RegionTree { root: root.clone(), leaves, transition }
    }

    /// Total measure labeled with corner `j`.
    pub fn measure(&self, j: usize) -> f64 {
        self.leaves.iter().filter(|l| l.label == j).map(|l| l.measure).sum()
    }

    /// Total pinned measure.
    pub fn pinned(&self) -> f64 {
        self.leaves.iter().filter(|l| l.label > 0).map(|l| l.measure).sum()
    }

    /// Distinct corner labels present, ascending.
    pub fn labels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.leaves.iter().map(|l| l.label).filter(|j| *j > 0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Cells tiling slot `k` of `shape` so at least `(1 − budget)` of the slot is
/// covered. One-dimensional slots are tiled exactly.
pub fn slot_lattice(shape: &BlockShape, k: usize, budget: f64, level: usize) -> Result<Lattice, StaircaseError> {
    let frac = shape.fractions[k];
    for d in 0..=MAX_REFINE {
        let lat = plateau_lattice(shape, k, d).ok_or(StaircaseError::Oblique { level })?;
        if lat.coverage() >= (1.0 - budget) * frac {
            return Ok(lat);
        }
    }
    Err(StaircaseError::Bound { what: format!("tiling of slot {k} at level {level}"), measured: 0.0, required: frac })
}

/// Tolerance of each block: half the budget in dimension two, where the
/// other half pays for tiling the slots by squares.
fn block_eps(n: usize, eps: f64) -> f64 {
    if n >= 2 { 0.5 * eps } else { eps }
}

struct Level {
    base: MatrixPair,
    shape: BlockShape,
    pin0: Option<Pin>,
    lattice: Option<Lattice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerReport {
    /// `|G_j|`, entry `j−1`.
    pub measures: Vec<f64>,
    pub required: Vec<f64>,
    pub total: f64,
    pub total_required: f64,
    pub containment: f64,
    pub sup_phi: f64,
    pub blocks: usize,
    pub max_ell: u64,
}

#[derive(Clone, Debug)]
pub struct Staircase {
    pub node: Arc<Node>,
    pub plan: StaircasePlan,
    pub regions: RegionTree,
    pub report: CornerReport,
}

fn pin(corner: usize, tag: Tag) -> Pin {
    Pin { corner, lambda: tag.lambda, stage: tag.stage }
}

/// Builds the chain top-down (each block needs its physical side), then
/// links it bottom-up.
fn build_chain(plan: &StaircasePlan, side: f64, tag: Tag, seed: u64) -> Result<(Arc<Node>, u64), StaircaseError> {
    let cfg = &plan.cfg;
    let big_n = cfg.len();
    let i = plan.i as isize;
    let n = cfg.rho.n();
    let eta = cfg.xi(i).lerp(plan.lambda, cfg.pi(i));
    if plan.lambda == 1.0 {
        return Ok((Arc::new(Node::constant(tag.stage, eta, Some(pin(plan.i, tag)))), 0));
    }
    let eb = block_eps(n, plan.eps_inner);
    let mut specs: Vec<(WaveVector, f64, usize)> = Vec::new();
    if plan.lambda > 0.0 {
        specs.push((cfg.gamma(i).scaled(cfg.kappa(i)), plan.lambda, plan.i));
    }
    for s in 1..=(plan.ell as usize * big_n) {
        let k = i - s as isize;
        specs.push((cfg.gamma(k).scaled(cfg.kappa(k)), cfg.chi(k), slot(k, big_n) + 1));
    }
    let mut levels: Vec<Level> = Vec::with_capacity(specs.len());
    let mut base = eta;
    let mut side = side;
    let mut max_ell = 0;
    let last = specs.len() - 1;
    for (lv, (gamma, lambda, corner)) in specs.iter().enumerate() {
        let cube = Cube::new(vec![0.0; n], 0.5 * side);
        let blk = make_block_seeded(gamma, *lambda, &cube, eb, rng::subtask(seed, lv as u64))
            .map_err(|err| StaircaseError::Block { level: lv, err })?;
        max_ell = max_ell.max(blk.shape.ell);
        let lattice = if lv < last { Some(slot_lattice(&blk.shape, 1, eb, lv)?) } else { None };
        let next = &base + &blk.shape.slot_offset(1);
        if let Some(l) = &lattice {
            side *= l.h();
        }
        levels.push(Level { base, shape: blk.shape, pin0: Some(pin(*corner, tag)), lattice });
        base = next;
    }
    let mut child: Option<Arc<Node>> = None;
    for lv in levels.into_iter().rev() {
        let mut node = Node::block(tag.stage, lv.base, lv.shape, [lv.pin0, None]);
        if let (Some(lattice), Some(c)) = (lv.lattice, child.take()) {
            node = node.with_fill(1, Fill { lattice, child: c });
        }
        child = Some(Arc::new(node));
    }
    Ok((child.expect("a staircase has at least one block"), max_ell))
}

fn check(what: impl Into<String>, measured: f64, required: f64, ok: bool) -> Result<(), StaircaseError> {
    if ok {
        Ok(())
    } else {
        Err(StaircaseError::Bound { what: what.into(), measured, required })
    }
}

fn sup_phi(node: &Node, side: f64) -> f64 {
    side * node.sup_u_hat(&mut BTreeMap::new())
}

/// Drives `η = λξ_i + (1 − λ)π_i` to the corners of `cfg` inside `cube`.
///
/// Verifies containment in `[𝒯]_δ` at sampled points, `sup|φ| < δ`,
/// `|G_j| ≥ (1 − δ)ν_j|cube|` and `Σ|G_j| ≥ (1 − δ)|cube|`.
pub fn oscillate_to_corners(
    cfg: &TNConfig,
    i: usize,
    lambda: f64,
    cube: &Cube,
    delta: f64,
    tag: Tag,
    seed: u64,
) -> Result<Staircase, StaircaseError> {
    let plan = plan_staircase(cfg, i, lambda, delta)?;
    let side = cube.side();
    let (node, max_ell) = build_chain(&plan, side, tag, seed)?;
    let regions = RegionTree::from_node(cube, &node);
    let vol = cube.volume();
    let weights = corner_weights(cfg, i as isize, lambda);
    let measures: Vec<f64> = (1..=cfg.len()).map(|j| regions.measure(j)).collect();
    let required: Vec<f64> = weights.iter().map(|w| (1.0 - delta) * w * vol).collect();
    for (j, (m, r)) in measures.iter().zip(&required).enumerate() {
        check(format!("|G_{}| >= (1-delta) nu_{} |G|", j + 1, j + 1), *m, *r, *m >= *r)?;
    }
    let total = regions.pinned();
    let total_required = (1.0 - delta) * vol;
    check("sum |G_j| >= (1-delta)|G|", total, total_required, total >= total_required)?;
    let mut r = rng::stream(seed, 0x7374);
    let mut containment: f64 = 0.0;
    for _ in 0..VERIFY_SAMPLES {
        containment = containment.max(tn_distance(cfg, &node.sample(side, &mut r).pair));
    }
    check("sampled distance to T", containment, delta, containment < delta)?;
    let sup = sup_phi(&node, side);
    check("sup |phi|", sup, delta, sup < delta)?;
    let report = CornerReport {
        measures,
        required,
        total,
        total_required,
        containment,
        sup_phi: sup,
        blocks: if lambda == 1.0 { 0 } else { plan.blocks() - usize::from(lambda == 0.0) },
        max_ell,
    };
    Ok(Staircase { node, plan, regions, report })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub lambda: f64,
    pub mu: f64,
    pub r: f64,
    pub tau: f64,
    pub tag: Tag,
    /// Radius of a neighborhood of the segments that stays inside Σ^r(μ);
    /// measured locally when absent.
    pub eps_nbhd: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub q: f64,
    pub delta_inner: f64,
    pub eps_nbhd: f64,
    pub measures: Vec<f64>,
    pub required: Vec<f64>,
    pub total: f64,
    pub total_required: f64,
    pub sup_phi: f64,
    pub samples: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug)]
pub struct Step {
    pub node: Arc<Node>,
    pub regions: RegionTree,
    pub report: StepReport,
}

fn segment_points(a: &MatrixPair, b: &MatrixPair, out: &mut Vec<MatrixPair>) {
    for k in 0..=4 {
        out.push(a.lerp(k as f64 / 4.0, b));
    }
}

/// Half the smallest distance from sampled points of `[ζ, π]` and of both
/// configurations' 𝒯 to the complement of Σ^r(μ).
pub fn step_radius(s: &Scenario, mu: f64, r: f64, z: &MatrixPair, p: &MatrixPair, cfgs: &[&TNConfig]) -> f64 {
    let mut pts = Vec::new();
    segment_points(z, p, &mut pts);
    for c in cfgs {
        for seg in c.segments() {
            segment_points(&seg.alpha, &seg.beta, &mut pts);
        }
    }
    let d = s.dim();
    let mut dirs = Vec::with_capacity(2 * d);
    for k in 0..d {
        for sign in [1.0, -1.0] {
            let mut v = vec![0.0; d];
            v[k] = sign;
            dirs.push(MatrixPair::from_slice(s.m, s.n, &v));
        }
    }
    let member = sigma_member(s, r, mu);
    let best = pts.iter().map(|x| boundary_distance(x, &member, &dirs, 1.0)).fold(f64::INFINITY, f64::min);
    0.5 * best
}

fn check_step_pre(s: &Scenario, dec: &Decomposition, y: &MatrixPair, p: &StepParams) -> Result<(), StaircaseError> {
    let pre = |m: String| Err(StaircaseError::Precondition(m));
    if !(s.delta2 <= dec.lambda_prime + 1e-12 && dec.lambda_prime <= p.lambda + 1e-12) {
        return pre(format!("need delta2 <= lambda' <= lambda, got lambda' = {}", dec.lambda_prime));
    }
    if !(p.lambda <= p.mu && p.mu < 1.0) {
        return pre(format!("need lambda <= mu < 1, got {} and {}", p.lambda, p.mu));
    }
    if !(p.r > 0.0 && p.r <= s.r0) {
        return pre(format!("r = {} outside (0, r0]", p.r));
    }
    if !(p.tau > 0.0 && p.tau < 1.0) {
        return pre(format!("tau = {} outside (0,1)", p.tau));
    }
    dec.verify(s, p.r, p.lambda, y).map_err(StaircaseError::Precondition)
}

/// Pushes `y = qζ_i(λ′, ρ) + (1 − q)π_i(ρ′)` into Σ^r(μ) inside `cube`.
///
/// A split block along `ζ − π` feeds a corner staircase for `(ζ_j(μ, ρ))_j`
/// on its ζ plateau and one for `(ζ_j(μ, ρ′))_j` on its π plateau. Pinned
/// regions are checked against the per-corner lower bounds with factor
/// `1 − τ`; sampled values must decompose in Σ^r(μ).
pub fn step_in_sigma(
    s: &Scenario,
    dec: &Decomposition,
    y: &MatrixPair,
    cube: &Cube,
    p: &StepParams,
) -> Result<Step, StaircaseError> {
    check_step_pre(s, dec, y, p)?;
    let i = dec.i;
    let q = dec.q;
    let lc = (dec.lambda_prime / p.mu).min(1.0);
    let cfg_z = s.tn_at(p.mu, &dec.rho)?;
    let cfg_p = s.tn_at(p.mu, &dec.rho_prime)?;
    let z = dec.zeta_point(s);
    let pp = dec.pi_point(s);
    let eps_nbhd = match p.eps_nbhd {
        Some(e) => e,
        None => step_radius(s, p.mu, p.r, &z, &pp, &[&cfg_z, &cfg_p]),
    };
    let delta_in = 0.999 * eps_nbhd.min(0.5 * p.tau).min(1.0 - num::sqrt(1.0 - p.tau));
    if !(delta_in > 0.0) {
        return Err(StaircaseError::Precondition(format!("no room around the segments (radius {eps_nbhd:e})")));
    }
    let n = cube.dim();
    let side = cube.side();
    let mut blocks = 0;
    let node = if q == 1.0 || q == 0.0 {
        let (cfg, l) = if q == 1.0 { (&cfg_z, lc) } else { (&cfg_p, 0.0) };
        let st = oscillate_to_corners(cfg, i, l, cube, delta_in, p.tag, p.seed)?;
        blocks += st.report.blocks;
        st.node
    } else {
        let gap = &z - &pp;
        let gamma = WaveVector::from_pair(&gap, 1e-8)
            .map_err(|e| StaircaseError::Precondition(format!("zeta - pi not in the wave cone: {e}")))?;
        let eb = block_eps(n, delta_in);
        let blk = make_block_seeded(&gamma, q, cube, eb, p.seed).map_err(|err| StaircaseError::Block { level: 0, err })?;
        blocks += 1;
        let lat_z = slot_lattice(&blk.shape, 0, eb, 0)?;
        let lat_p = slot_lattice(&blk.shape, 1, eb, 0)?;
        let sub = |h: f64| Cube::new(vec![0.0; n], 0.5 * side * h);
        let st_z = oscillate_to_corners(&cfg_z, i, lc, &sub(lat_z.h()), delta_in, p.tag, rng::subtask(p.seed, 1))?;
        let st_p = oscillate_to_corners(&cfg_p, i, 0.0, &sub(lat_p.h()), delta_in, p.tag, rng::subtask(p.seed, 2))?;
        blocks += st_z.report.blocks + st_p.report.blocks;
        let split = Node::block(p.tag.stage, y.clone(), blk.shape, [None, None])
            .with_fill(0, Fill { lattice: lat_z, child: st_z.node })
            .with_fill(1, Fill { lattice: lat_p, child: st_p.node });
        Arc::new(split)
    };
    let regions = RegionTree::from_node(cube, &node);
    let vol = cube.volume();
    let w_z = corner_weights(&cfg_z, i as isize, lc);
    let w_p = corner_weights(&cfg_p, i as isize, 0.0);
    let f = 1.0 - p.tau;
    let measures: Vec<f64> = (1..=s.big_n).map(|j| regions.measure(j)).collect();
    let required: Vec<f64> = w_z.iter().zip(&w_p).map(|(a, b)| f * (q * a + (1.0 - q) * b) * vol).collect();
    for (j, (m, r)) in measures.iter().zip(&required).enumerate() {
        check(format!("|G_{}| >= (1-tau)[(1-q) nu' + q nu] |G|", j + 1), *m, *r, *m >= *r)?;
    }
    let total = regions.pinned();
    let total_required = f * vol;
    check("sum |G_j| >= (1-tau)|G|", total, total_required, total >= total_required)?;
    for leaf in regions.leaves.iter().filter(|l| l.label > 0) {
        let ok = in_s(s, p.r, p.mu, &leaf.value, leaf.label);
        check(format!("pinned value of label {} in S_j^r(mu)", leaf.label), 0.0, 0.0, ok)?;
    }
    let mut rg = rng::stream(p.seed, 0x7374_6570);
    for _ in 0..VERIFY_SAMPLES {
        let v = node.sample(side, &mut rg).pair;
        if !in_sigma(s, p.r, p.mu, &v) {
            return Err(StaircaseError::Bound {
                what: format!("sampled value {v} outside Sigma^r(mu)"),
                measured: 1.0,
                required: 0.0,
            });
        }
    }
    let sup = sup_phi(&node, side);
    check("sup |phi| < tau", sup, p.tau, sup < p.tau)?;
    let report = StepReport {
        q,
        delta_inner: delta_in,
        eps_nbhd,
        measures,
        required,
        total,
        total_required,
        sup_phi: sup,
        samples: VERIFY_SAMPLES,
        blocks,
    };
    Ok(Step { node, regions, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::fd_divergence_residual;
    use crate::field::{topo_order, Integrator};
    use crate::scenario::{decompose_sigma, two_branch_scenario};
    use crate::tnconfig::t4_fixture as t4;
    use proptest::prelude::*;

    const TAG: Tag = Tag { stage: 1, lambda: 1.0 };

    fn two_branch_cfg() -> TNConfig {
        two_branch_scenario().tn_at(1.0, &MatrixPair::zeros(1, 1)).unwrap()
    }

    fn unit(n: usize) -> Cube {
        Cube::new(vec![0.0; n], 0.5)
    }

    #[test]
    fn plan_examples() {
        let cfg = two_branch_cfg();
        assert!((cfg.tau() - 1.0 / 3.0).abs() < 1e-15);
        let p = plan_staircase(&cfg, 1, 0.0, 0.5).unwrap();
        assert_eq!(p.ell, 2);
        assert!((1.0 + 2.0 * 2.0) * p.eps_inner < 0.5);
        assert!(num::pow(1.0 - p.eps_inner, 5.0) >= num::sqrt(0.5));
        // Largest dyadic: doubling breaks one of the constraints.
        let e2 = 2.0 * p.eps_inner;
        assert!(!(5.0 * e2 < 0.5 && num::pow(1.0 - e2, 5.0) >= num::sqrt(0.5)));
        assert_eq!(plan_staircase(&cfg, 1, 0.0, 0.99).unwrap().ell, 1);
        assert!(plan_staircase(&cfg, 1, 0.0, 1.0).is_err());
        assert!(plan_staircase(&cfg, 3, 0.0, 0.5).is_err());
    }

    #[test]
    fn lambda_one_is_a_single_pinned_region() {
        let cfg = two_branch_cfg();
        let st = oscillate_to_corners(&cfg, 1, 1.0, &unit(1), 0.3, TAG, 1).unwrap();
        assert!(st.node.shape.is_none());
        assert_eq!(st.regions.labels(), vec![1]);
        assert_eq!(st.report.sup_phi, 0.0);
        assert_eq!(st.regions.measure(1), 1.0);
        assert_eq!(st.regions.leaves[0].value, *cfg.xi(1));
    }

    #[test]
    fn two_branch_lambda_zero_example() {
        let cfg = two_branch_cfg();
        let w = corner_weights(&cfg, 1, 0.0);
        assert!((w[0] - 0.5).abs() < 1e-14 && (w[1] - 0.5).abs() < 1e-14);
        let cube = Cube::new(vec![0.3], 0.125);
        let st = oscillate_to_corners(&cfg, 1, 0.0, &cube, 0.4, TAG, 2).unwrap();
        assert_eq!(st.regions.labels(), vec![1, 2]);
        for j in 0..2 {
            assert!(st.report.measures[j] >= 0.6 * w[j] * cube.volume());
        }
        assert!(st.report.containment < 0.4 && st.report.sup_phi < 0.4);
    }

    #[test]
    fn two_branch_bounds_for_all_targets() {
        let cfg = two_branch_cfg();
        for delta in [0.2, 0.5] {
            for i in 1..=2 {
                for lambda in [0.0, 0.3, 0.8] {
                    let st = oscillate_to_corners(&cfg, i, lambda, &unit(1), delta, TAG, 3).unwrap();
                    let r = &st.report;
                    for j in 0..2 {
                        assert!(r.measures[j] >= r.required[j], "delta {delta} i {i} lambda {lambda} j {j}");
                    }
                    assert!(r.total >= (1.0 - delta));
                }
            }
        }
    }

    #[test]
    fn t4_reaches_all_corners_and_is_divergence_free() {
        let cfg = t4();
        let st = oscillate_to_corners(&cfg, 1, 0.0, &unit(2), 0.5, TAG, 4).unwrap();
        assert_eq!(st.regions.labels(), vec![1, 2, 3, 4]);
        let mut psi_max: f64 = 0.0;
        for node in topo_order(core::slice::from_ref(&st.node)) {
            let Some(shape) = &node.shape else { continue };
            assert!(fd_divergence_residual(shape, 40, 5) < 1e-4);
            let mut r = rng::stream(6, 0);
            for _ in 0..200 {
                let y: Vec<f64> = (0..2).map(|_| rng::range(&mut r, -0.5, 0.5)).collect();
                psi_max = psi_max.max(shape.eval_local(&y).psi.norm());
            }
        }
        assert!(psi_max > 1e-3);
    }

    #[test]
    fn t4_bounds_every_corner() {
        let cfg = t4();
        for delta in [0.2, 0.5] {
            for i in 1..=4 {
                let st = oscillate_to_corners(&cfg, i, 0.4, &unit(2), delta, TAG, 7).unwrap();
                for j in 0..4 {
                    assert!(st.report.measures[j] >= st.report.required[j]);
                }
            }
        }
    }

    #[test]
    fn leaves_sit_exactly_on_plateaus() {
        let cfg = t4();
        let st = oscillate_to_corners(&cfg, 2, 0.5, &unit(2), 0.5, TAG, 8).unwrap();
        let mut r = rng::stream(9, 0);
        let mut hits = 0;
        for node in topo_order(core::slice::from_ref(&st.node)) {
            let Some(shape) = &node.shape else { continue };
            for _ in 0..400 {
                let y: Vec<f64> = (0..2).map(|_| rng::range(&mut r, -0.5, 0.5)).collect();
                let Some(k) = shape.plateau_slot(&y) else { continue };
                let v = &node.base + &shape.eval_local(&y).pair();
                assert!(v.dist(&node.slots[k].value) < 1e-10);
                hits += 1;
            }
        }
        assert!(hits > 100);
    }

    #[test]
    fn leaf_measures_match_integrator_and_monte_carlo() {
        let cfg = two_branch_cfg();
        let st = oscillate_to_corners(&cfg, 2, 0.25, &unit(1), 0.3, TAG, 10).unwrap();
        let samples = 40_000;
        let mut r = rng::stream(11, 0);
        let mut hits = [0usize; 2];
        for _ in 0..samples {
            if let Some(p) = st.node.sample(1.0, &mut r).pin {
                hits[p.corner - 1] += 1;
            }
        }
        for j in 1..=2 {
            let g = |_: &MatrixPair, p: Option<&Pin>| if p.map_or(0, |p| p.corner) == j { 1.0 } else { 0.0 };
            let exact = st.regions.measure(j);
            let integ = Integrator::new(&g).average(&st.node);
            assert!((integ - exact).abs() < 1e-9, "{integ} vs {exact}");
            let mc = hits[j - 1] as f64 / samples as f64;
            let sd = num::sqrt(exact * (1.0 - exact) / samples as f64);
            assert!((mc - exact).abs() < 4.0 * sd + 1e-3, "{mc} vs {exact}");
        }
        let sum: f64 = st.regions.leaves.iter().map(|l| l.measure).sum();
        assert!((sum + st.regions.transition - 1.0).abs() < 1e-12);
    }

    fn step_params(tau: f64) -> StepParams {
        StepParams { lambda: 0.7, mu: 0.85, r: 0.1, tau, tag: Tag { stage: 2, lambda: 0.85 }, eps_nbhd: None, seed: 12 }
    }

    fn run_step(y1: f64) -> (Decomposition, Step) {
        let s = two_branch_scenario();
        let y = MatrixPair::scalar(y1, 0.0);
        let dec = decompose_sigma(&s, 0.1, 0.7, &y).unwrap();
        let st = step_in_sigma(&s, &dec, &y, &unit(1), &step_params(0.2)).unwrap();
        (dec, st)
    }

    #[test]
    fn step_q_one_matches_worked_example() {
        let s = two_branch_scenario();
        let (dec, st) = run_step(1.4);
        assert_eq!(dec.q, 1.0);
        let nu = pi_nu(&s, 0.85);
        let want = 0.8 * (0.7 / 0.85 + (1.0 - 0.7 / 0.85) * nu[0]);
        assert!((st.report.required[0] - want).abs() < 1e-12);
        assert!(st.report.measures[0] >= want);
        // The split block is skipped: the root is the staircase's first block.
        assert_eq!(st.node.slots[0].pin.map(|p| p.corner), Some(1));
    }

    fn pi_nu(s: &Scenario, mu: f64) -> Vec<f64> {
        crate::scenario::pi_decomposition(s, 1, mu, &MatrixPair::zeros(1, 1)).unwrap()
    }

    #[test]
    fn step_mixed_and_pi_side() {
        let (dec, st) = run_step(0.7);
        assert!(dec.q > 0.0 && dec.q < 1.0);
        assert!(st.node.slots.iter().all(|s| s.fill.is_some()));
        assert!(st.report.total >= 0.8);
        let (dec0, st0) = run_step(0.05);
        assert_eq!(dec0.q, 0.0);
        assert!(st0.node.slots[0].pin.is_some());
        assert!(st0.report.sup_phi < 0.2);
    }

    #[test]
    fn step_rejects_bad_witness() {
        let s = two_branch_scenario();
        let y = MatrixPair::scalar(1.4, 0.0);
        let mut dec = decompose_sigma(&s, 0.1, 0.7, &y).unwrap();
        dec.q = 0.5;
        let err = step_in_sigma(&s, &dec, &y, &unit(1), &step_params(0.2)).unwrap_err();
        assert!(matches!(err, StaircaseError::Precondition(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn plan_invariants(delta in 0.01f64..0.99, c1 in 0.05f64..0.95, c2 in 0.05f64..0.95) {
            let g = WaveVector { p: vec![1.0], a: vec![1.0], b: crate::geometry::Mat::zeros(1, 1) };
            let cfg = crate::tnconfig::build_tn(MatrixPair::zeros(1, 1), vec![g.clone(), g.scaled(-1.0)], vec![1.0 / c1, 1.0 / c2]).unwrap();
            let p = plan_staircase(&cfg, 1, 0.5, delta).unwrap();
            let steps = 1.0 + 2.0 * p.ell as f64;
            prop_assert!(1.0 - num::powi(p.tau, p.ell as i32) >= num::sqrt(1.0 - delta));
            prop_assert!(p.ell == 1 || 1.0 - num::powi(p.tau, p.ell as i32 - 1) < num::sqrt(1.0 - delta));
            prop_assert!(steps * p.eps_inner < delta);
            prop_assert!(num::pow(1.0 - p.eps_inner, steps) >= num::sqrt(1.0 - delta));
        }
    }
}
