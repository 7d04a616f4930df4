//! Exactly evaluable fields: a base pair plus nested block perturbations.
//!
//! A [`Node`] is a scale-free template on the local unit box. Each plateau
//! slot of its block holds an exact value and may be filled by a lattice of
//! equal child boxes, all carrying the same child template. Templates are
//! shared through `Arc`, so a field is a DAG whose size does not grow with
//! the number of periods.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::blocks::{gauss8, gauss8_points, BlockShape};
use crate::geometry::{Cube, Domain, Mat, MatrixPair};
use crate::num;
use crate::rng;

/// Label of a pinned region: the value lies in `S_corner` at parameter `lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pin {
    pub corner: usize,
    pub lambda: f64,
    pub stage: usize,
}

/// Cells along one axis at `start + g·stride + i·h`, `g < groups`, `i < count`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisLattice {
    pub start: f64,
    pub h: f64,
    pub count: u64,
    pub stride: f64,
    pub groups: u64,
}

impl AxisLattice {
    pub fn single(start: f64, h: f64, count: u64) -> Self {
        AxisLattice { start, h, count, stride: h * count as f64, groups: 1 }
    }

    pub fn cells(&self) -> u64 {
        self.count * self.groups
    }

    /// Cell index and the coordinate inside it, in `(−½, ½)`.
    pub fn locate(&self, y: f64) -> Option<(u64, f64)> {
        let rel = y - self.start;
        if !(rel > 0.0) {
            return None;
        }
        let g = num::floor(rel / self.stride);
        if g >= self.groups as f64 {
            return None;
        }
        let off = rel - g * self.stride;
        let i = num::floor(off / self.h);
        if i >= self.count as f64 || i < 0.0 {
            return None;
        }
        let z = (off - i * self.h) / self.h - 0.5;
        if z <= -0.5 || z >= 0.5 {
            return None;
        }
        Some((g as u64 * self.count + i as u64, z))
    }

    /// Lower edge of cell `idx`.
    pub fn lower(&self, idx: u64) -> f64 {
        let (g, i) = (idx / self.count, idx % self.count);
        self.start + g as f64 * self.stride + i as f64 * self.h
    }
}

/// Product of axis lattices; all cells are cubes of side `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub axes: Vec<AxisLattice>,
}

impl Lattice {
    pub fn h(&self) -> f64 {
        self.axes[0].h
    }

    pub fn cells(&self) -> u64 {
        self.axes.iter().map(AxisLattice::cells).product()
    }

    /// Normalized volume covered by the cells.
    pub fn coverage(&self) -> f64 {
        self.cells() as f64 * num::powi(self.h(), self.axes.len() as i32)
    }

    pub fn locate(&self, y: &[f64]) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(y.len());
        for (ax, v) in self.axes.iter().zip(y) {
            out.push(ax.locate(*v)?.1);
        }
        Some(out)
    }

    /// Cell containing `y`, as per-axis indices.
    pub fn index_of(&self, y: &[f64]) -> Option<Vec<u64>> {
        let mut out = Vec::with_capacity(y.len());
        for (ax, v) in self.axes.iter().zip(y) {
            out.push(ax.locate(*v)?.0);
        }
        Some(out)
    }

    /// Cell with per-axis indices `idx`, in the parent's local frame.
    pub fn cell(&self, idx: &[u64]) -> Cube {
        let h = self.h();
        let center = self.axes.iter().zip(idx).map(|(ax, i)| ax.lower(*i) + 0.5 * h).collect();
        Cube::new(center, 0.5 * h)
    }

    /// Uniformly random cell.
    pub fn random_cell(&self, r: &mut rng::Rng) -> Vec<u64> {
        self.axes.iter().map(|ax| (rng::uniform(r) * ax.cells() as f64) as u64 % ax.cells()).collect()
    }

    /// Splits each cell into `2^d` per axis.
    pub fn refine(&self, d: u32) -> Lattice {
        let k = 1u64 << d;
        let axes = self
            .axes
            .iter()
            .map(|ax| AxisLattice {
                start: ax.start,
                h: ax.h / k as f64,
                count: ax.count * k,
                stride: ax.stride,
                groups: ax.groups,
            })
            .collect();
        Lattice { axes }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fill {
    pub lattice: Lattice,
    pub child: Arc<Node>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub value: MatrixPair,
    pub pin: Option<Pin>,
    pub fill: Option<Fill>,
}

/// Template on the local unit box `(−½, ½)ⁿ`.
///
/// With a block, slot `k` is the plateau region `k` of the block. Without
/// one the node is a constant cell whose single slot is the whole box.
#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub stage: usize,
    pub base: MatrixPair,
    pub shape: Option<BlockShape>,
    pub slots: Vec<Slot>,
}

/// Result of evaluating a template at a local point.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEval {
    /// Perturbation of `u` in physical units.
    pub u: Vec<f64>,
    pub pair: MatrixPair,
    pub pin: Option<Pin>,
    pub depth: usize,
    /// Whether the point lies on a plateau slot (the value is exact there).
    pub plateau: bool,
}

impl Node {
    pub fn constant(stage: usize, value: MatrixPair, pin: Option<Pin>) -> Node {
        Node { stage, base: value.clone(), shape: None, slots: vec![Slot { value, pin, fill: None }] }
    }

    /// Block node; slot values are `base + (1 − λ)γ` and `base − λγ`.
    pub fn block(stage: usize, base: MatrixPair, shape: BlockShape, pins: [Option<Pin>; 2]) -> Node {
        let slots = (0..2)
            .map(|k| Slot { value: &base + &shape.slot_offset(k), pin: pins[k], fill: None })
            .collect();
        Node { stage, base, shape: Some(shape), slots }
    }

    pub fn with_fill(mut self, slot: usize, fill: Fill) -> Node {
        self.slots[slot].fill = Some(fill);
        self
    }

    pub fn m(&self) -> usize {
        self.base.m()
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    /// Normalized measure of slot `k` (before any fill).
    pub fn slot_fraction(&self, k: usize) -> f64 {
        match &self.shape {
            Some(s) => s.fractions[k],
            None => 1.0,
        }
    }

    /// Slot containing the local point, if any.
    pub fn slot_at(&self, y: &[f64]) -> Option<usize> {
        match &self.shape {
            Some(s) => s.plateau_slot(y),
            None => BlockShape::in_box(y).then_some(0),
        }
    }

    /// Evaluates at `y` in a box of physical side `side`.
    pub fn eval_local(&self, y: &[f64], side: f64) -> LocalEval {
        let mut node = self;
        let mut y = y.to_vec();
        let mut side = side;
        let mut u = vec![0.0; self.m()];
        let mut depth = 0;
        loop {
            let mut pair = node.base.clone();
            if let Some(shape) = &node.shape {
                let v = shape.eval_local(&y);
                for (acc, p) in u.iter_mut().zip(&v.phi_hat) {
                    *acc += side * p;
                }
                pair = &pair + &v.pair();
            }
            let Some(k) = node.slot_at(&y) else {
                return LocalEval { u, pair, pin: None, depth, plateau: false };
            };
            let slot = &node.slots[k];
            if let Some(fill) = &slot.fill {
                if let Some(z) = fill.lattice.locate(&y) {
                    side *= fill.lattice.h();
                    y = z;
                    node = &fill.child;
                    depth += 1;
                    continue;
                }
            }
            return LocalEval { u, pair: slot.value.clone(), pin: slot.pin, depth, plateau: true };
        }
    }

    /// Uniform sample of the template inside the local box `region`
    /// (a sub-box of `(−½, ½)ⁿ` given by per-axis bounds), evaluated in local
    /// frames so precision does not degrade with depth.
    pub fn sample_in(&self, region: &[(f64, f64)], side: f64, r: &mut rng::Rng) -> LocalEval {
        let mut node = self;
        let mut region: Vec<(f64, f64)> = region.to_vec();
        let mut side = side;
        let mut u = vec![0.0; self.m()];
        let mut depth = 0;
        loop {
            let y: Vec<f64> = region.iter().map(|(a, b)| a + (b - a) * rng::uniform(r)).collect();
            let mut pair = node.base.clone();
            if let Some(shape) = &node.shape {
                let v = shape.eval_local(&y);
                for (acc, p) in u.iter_mut().zip(&v.phi_hat) {
                    *acc += side * p;
                }
                pair = &pair + &v.pair();
            }
            let Some(k) = node.slot_at(&y) else {
                return LocalEval { u, pair, pin: None, depth, plateau: false };
            };
            let slot = &node.slots[k];
            if let Some(fill) = &slot.fill {
                if let Some(idx) = fill.lattice.index_of(&y) {
                    let cell = fill.lattice.cell(&idx);
                    let h = cell.side();
                    // Part of the region inside this cell, in the cell's frame.
                    region = region
                        .iter()
                        .enumerate()
                        .map(|(i, (a, b))| {
                            let lo = ((a - cell.center[i]) / h).max(-0.5);
                            let hi = ((b - cell.center[i]) / h).min(0.5);
                            (lo, hi)
                        })
                        .collect();
                    side *= h;
                    node = &fill.child;
                    depth += 1;
                    continue;
                }
            }
            return LocalEval { u, pair: slot.value.clone(), pin: slot.pin, depth, plateau: true };
        }
    }

    /// Uniform sample of the whole template.
    pub fn sample(&self, side: f64, r: &mut rng::Rng) -> LocalEval {
        self.sample_in(&vec![(-0.5, 0.5); self.n()], side, r)
    }

    /// `sup |u-perturbation| / side`: one active block per depth.
    pub fn sup_u_hat(&self, memo: &mut BTreeMap<usize, f64>) -> f64 {
        let key = self as *const Node as usize;
        if let Some(v) = memo.get(&key) {
            return *v;
        }
        let own = self.shape.as_ref().map_or(0.0, BlockShape::sup_phi_hat);
        let mut below: f64 = 0.0;
        for s in &self.slots {
            if let Some(f) = &s.fill {
                below = below.max(f.lattice.h() * f.child.sup_u_hat(memo));
            }
        }
        let v = own + below;
        memo.insert(key, v);
        v
    }
}

/// Integrand over field values; pinned points also pass their label.
pub type Integrand<'a> = &'a (dyn Fn(&MatrixPair, Option<&Pin>) -> f64 + 'a);

const RAMP_PIECES: usize = 8;
const MARGIN_PIECES: usize = 8;
const PLATEAU_PIECES: [usize; 2] = [2, 6];

fn composite(f: &dyn Fn(f64) -> f64, a: f64, b: f64, pieces: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / pieces as f64;
    (0..pieces).map(|k| gauss8(f, a + k as f64 * h, a + (k + 1) as f64 * h)).sum()
}

/// Memoized averages `⨍ g` over template boxes.
pub struct Integrator<'a> {
    g: Integrand<'a>,
    memo: BTreeMap<usize, f64>,
}

impl<'a> Integrator<'a> {
    pub fn new(g: Integrand<'a>) -> Self {
        Integrator { g, memo: BTreeMap::new() }
    }

    /// Average of `g` over the unit box of `node`, children included.
    pub fn average(&mut self, node: &Node) -> f64 {
        let key = node as *const Node as usize;
        if let Some(v) = self.memo.get(&key) {
            return *v;
        }
        let mut acc = self.transitions(node);
        for (k, slot) in node.slots.iter().enumerate() {
            let frac = node.slot_fraction(k);
            let covered = match &slot.fill {
                Some(fill) => {
                    let c = fill.lattice.coverage();
                    acc += c * self.average(&fill.child);
                    c
                }
                None => 0.0,
            };
            if frac > covered {
                acc += (frac - covered) * (self.g)(&slot.value, slot.pin.as_ref());
            }
        }
        self.memo.insert(key, acc);
        acc
    }

    /// Average over the part of the box outside both plateau slots.
    fn transitions(&self, node: &Node) -> f64 {
        let Some(shape) = &node.shape else {
            return 0.0;
        };
        if shape.is_trivial() {
            return 0.0;
        }
        let n = shape.n();
        let g = self.g;
        let base = &node.base;
        let val = |s: f64, y: &[f64]| g(&(base + &shape.eval_parts(s, y).pair()), None);
        let knots = shape.profile.knots();
        // ∫ over one period at fixed y, optionally skipping the plateaus.
        let line = |y: &[f64], skip_plateaus: bool| -> f64 {
            let mut acc = 0.0;
            for p in 0..9 {
                let (a, b) = (knots[p], knots[p + 1]);
                if b <= a || (skip_plateaus && PLATEAU_PIECES.contains(&p)) {
                    continue;
                }
                if p % 4 == 0 {
                    // Zero zone: f = q = 0, so the value is the base.
                    acc += (b - a) * val(0.5 * (a + b), y);
                } else {
                    acc += composite(&|s| val(s, y), a, b, RAMP_PIECES);
                }
            }
            acc
        };
        match shape.axis {
            Some(k) if n <= 2 => {
                let inner: f64 = shape.margins.iter().map(|m| 1.0 - 2.0 * m).product();
                let mut acc = inner * line(&vec![0.0; n], true);
                if n == 2 {
                    let p = 1 - k;
                    let m = shape.margins[p];
                    let band = |t: f64| {
                        let mut y = vec![0.0; 2];
                        y[p] = t;
                        line(&y, false)
                    };
                    acc += composite(&band, -0.5, -0.5 + m, MARGIN_PIECES);
                    acc += composite(&band, 0.5 - m, 0.5, MARGIN_PIECES);
                }
                acc
            }
            _ => self.tensor_fallback(node, shape),
        }
    }

    /// Tensor Gauss rule on the whole box, for oblique or high-dimensional blocks.
    fn tensor_fallback(&self, node: &Node, shape: &BlockShape) -> f64 {
        let n = shape.n();
        let per_axis = 16usize;
        let pts: Vec<(f64, f64)> = (0..per_axis)
            .flat_map(|c| {
                let a = -0.5 + c as f64 / per_axis as f64;
                let h = 1.0 / per_axis as f64;
                gauss8_points(a, a + h)
            })
            .collect();
        let total = num::powi(pts.len() as f64, n as i32) as usize;
        let mut acc = 0.0;
        let mut y = vec![0.0; n];
        for idx in 0..total {
            let mut w = 1.0;
            let mut rest = idx;
            for v in y.iter_mut() {
                let (x, wx) = pts[rest % pts.len()];
                rest /= pts.len();
                *v = x;
                w *= wx;
            }
            if shape.plateau_slot(&y).is_none() {
                let v = shape.eval_local(&y);
                acc += w * (self.g)(&(&node.base + &v.pair()), None);
            }
        }
        acc
    }
}

fn key(n: &Node) -> usize {
    n as *const Node as usize
}

/// Distinct nodes reachable from `roots`, parents before children.
pub fn topo_order(roots: &[Arc<Node>]) -> Vec<Arc<Node>> {
    let mut seen: BTreeMap<usize, ()> = BTreeMap::new();
    let mut post: Vec<Arc<Node>> = Vec::new();
    // Explicit stack of (node, next slot to visit).
    let mut stack: Vec<(Arc<Node>, usize)> = Vec::new();
    for r in roots {
        if seen.insert(key(r), ()).is_some() {
            continue;
        }
        stack.push((r.clone(), 0));
        while let Some((node, next)) = stack.pop() {
            let mut pushed = false;
            for k in next..node.slots.len() {
                if let Some(f) = &node.slots[k].fill {
                    if seen.insert(key(&f.child), ()).is_none() {
                        let child = f.child.clone();
                        stack.push((node.clone(), k + 1));
                        stack.push((child, 0));
                        pushed = true;
                        break;
                    }
                }
            }
            if !pushed {
                post.push(node);
            }
        }
    }
    post.reverse();
    post
}

/// A template together with how it is used inside the field.
#[derive(Clone, Debug)]
pub struct Usage {
    pub node: Arc<Node>,
    /// Total physical volume of all instances.
    pub mass: f64,
    /// Largest physical side among the instances.
    pub max_side: f64,
    pub instances: f64,
}

/// Masses and sizes of every template below `roots = (node, volume, side)`.
pub fn usages(roots: &[(Arc<Node>, f64, f64)]) -> Vec<Usage> {
    let order = topo_order(&roots.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
    let index: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, n)| (key(n), i)).collect();
    let mut out: Vec<Usage> =
        order.iter().map(|n| Usage { node: n.clone(), mass: 0.0, max_side: 0.0, instances: 0.0 }).collect();
    for (n, vol, side) in roots {
        let u = &mut out[index[&key(n)]];
        u.mass += vol;
        u.max_side = u.max_side.max(*side);
        u.instances += 1.0;
    }
    for i in 0..out.len() {
        let (mass, side, inst) = (out[i].mass, out[i].max_side, out[i].instances);
        let node = out[i].node.clone();
        for slot in &node.slots {
            if let Some(f) = &slot.fill {
                let j = index[&key(&f.child)];
                let cells = f.lattice.cells() as f64;
                out[j].mass += mass * f.lattice.coverage();
                out[j].max_side = out[j].max_side.max(side * f.lattice.h());
                out[j].instances += inst * cells;
            }
        }
    }
    out
}

/// `u(x) = u₀ + G·x` with constant `V`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineBase {
    pub u0: Vec<f64>,
    pub grad: Mat,
    pub v: Mat,
}

impl AffineBase {
    pub fn u(&self, x: &[f64]) -> Vec<f64> {
        self.grad.apply(x).iter().zip(&self.u0).map(|(a, b)| a + b).collect()
    }

    pub fn pair(&self) -> MatrixPair {
        MatrixPair::new(self.grad.clone(), self.v.clone())
    }
}

/// Root template placed on a cube of Ω.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub cube: Cube,
    pub node: Arc<Node>,
}

/// `(u, V) = (ū, V̄) + perturbations`, supported in the root cubes.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTree {
    pub base: AffineBase,
    pub domain: Domain,
    pub roots: Vec<Placement>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldValue {
    pub u: Vec<f64>,
    pub du: Mat,
    pub v: Mat,
    pub pin: Option<Pin>,
    pub depth: usize,
}

impl FieldValue {
    pub fn pair(&self) -> MatrixPair {
        MatrixPair::new(self.du.clone(), self.v.clone())
    }
}

impl FieldTree {
    pub fn new(base: AffineBase, domain: Domain) -> Self {
        FieldTree { base, domain, roots: Vec::new() }
    }

    pub fn n(&self) -> usize {
        self.domain.dim()
    }

    pub fn root_at(&self, x: &[f64]) -> Option<&Placement> {
        self.roots.iter().find(|p| p.cube.contains(x))
    }

    fn finish(&self, x: &[f64], e: Option<LocalEval>) -> FieldValue {
        let mut u = self.base.u(x);
        match e {
            Some(e) => {
                for (a, b) in u.iter_mut().zip(&e.u) {
                    *a += b;
                }
                FieldValue { u, du: e.pair.first, v: e.pair.second, pin: e.pin, depth: e.depth }
            }
            None => FieldValue { u, du: self.base.grad.clone(), v: self.base.v.clone(), pin: None, depth: 0 },
        }
    }

    /// Closed-form `(u, Du, V)` at a physical point.
    pub fn eval(&self, x: &[f64]) -> FieldValue {
        let e = self.root_at(x).map(|p| p.node.eval_local(&p.cube.to_local(x), p.cube.side()));
        self.finish(x, e)
    }

    /// Uniform sample of Ω with values computed in local frames; the
    /// returned point is the root-level position.
    pub fn sample(&self, r: &mut rng::Rng) -> (Vec<f64>, FieldValue) {
        let x = self.domain.sample(r);
        self.sample_near(&x, r)
    }

    /// Sample inside the root cube containing `x` (or `x` itself outside all roots).
    pub fn sample_near(&self, x: &[f64], r: &mut rng::Rng) -> (Vec<f64>, FieldValue) {
        match self.root_at(x) {
            Some(p) => {
                let e = p.node.sample(p.cube.side(), r);
                (x.to_vec(), self.finish(x, Some(e)))
            }
            None => (x.to_vec(), self.finish(x, None)),
        }
    }

    /// Uniform sample of `box ∩ Ω` for a probe box.
    pub fn sample_in_box(&self, b: &Cube, r: &mut rng::Rng) -> Option<FieldValue> {
        for _ in 0..64 {
            let x = b.sample(r);
            if !self.domain.contains(&x) {
                continue;
            }
            return Some(match self.root_at(&x) {
                Some(p) => {
                    let region: Vec<(f64, f64)> = (0..self.n())
                        .map(|i| {
                            let lo = ((b.lo(i) - p.cube.center[i]) / p.cube.side()).max(-0.5);
                            let hi = ((b.hi(i) - p.cube.center[i]) / p.cube.side()).min(0.5);
                            (lo, hi)
                        })
                        .collect();
                    let e = p.node.sample_in(&region, p.cube.side(), r);
                    self.finish(&x, Some(e))
                }
                None => self.finish(&x, None),
            });
        }
        None
    }

    /// `∫_Ω g`, exact on plateaus and by quadrature on transitions.
    pub fn integral(&self, g: Integrand<'_>) -> f64 {
        let mut it = Integrator::new(g);
        let mut covered = 0.0;
        let mut acc = 0.0;
        for p in &self.roots {
            let v = p.cube.volume();
            covered += v;
            acc += v * it.average(&p.node);
        }
        let rest = (self.domain.volume() - covered).max(0.0);
        acc + rest * g(&self.base.pair(), None)
    }

    /// Bound on `sup|u − ū|` from the block amplitudes along every chain.
    pub fn sup_drift(&self) -> f64 {
        let mut memo = BTreeMap::new();
        self.roots.iter().map(|p| p.cube.side() * p.node.sup_u_hat(&mut memo)).fold(0.0, f64::max)
    }

    pub fn usages(&self) -> Vec<Usage> {
        let roots: Vec<(Arc<Node>, f64, f64)> =
            self.roots.iter().map(|p| (p.node.clone(), p.cube.volume(), p.cube.side())).collect();
        usages(&roots)
    }

    pub fn template_count(&self) -> usize {
        topo_order(&self.roots.iter().map(|p| p.node.clone()).collect::<Vec<_>>()).len()
    }

    /// Flat, shared-node-preserving export.
    pub fn export(&self) -> FieldExport {
        let order = topo_order(&self.roots.iter().map(|p| p.node.clone()).collect::<Vec<_>>());
        let index: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, n)| (key(n), i)).collect();
        let nodes = order
            .iter()
            .enumerate()
            .map(|(id, n)| NodeRecord {
                id,
                stage: n.stage,
                base: n.base.clone(),
                shape: n.shape.clone(),
                slots: n
                    .slots
                    .iter()
                    .map(|s| SlotRecord {
                        value: s.value.clone(),
                        pin: s.pin,
                        fill: s.fill.as_ref().map(|f| (f.lattice.clone(), index[&key(&f.child)])),
                    })
                    .collect(),
            })
            .collect();
        FieldExport {
            base: self.base.clone(),
            domain: self.domain.clone(),
            roots: self.roots.iter().map(|p| (p.cube.clone(), index[&key(&p.node)])).collect(),
            nodes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub value: MatrixPair,
    pub pin: Option<Pin>,
    pub fill: Option<(Lattice, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub stage: usize,
    pub base: MatrixPair,
    pub shape: Option<BlockShape>,
    pub slots: Vec<SlotRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldExport {
    pub base: AffineBase,
    pub domain: Domain,
    pub roots: Vec<(Cube, usize)>,
    pub nodes: Vec<NodeRecord>,
}

/// Cubes tiling plateau slot `k` of an axis-aligned block (`n ≤ 2`), each
/// split `2^refine` times per axis. Returns `None` for oblique blocks.
pub fn plateau_lattice(shape: &BlockShape, k: usize, refine: u32) -> Option<Lattice> {
    let ax = shape.axis?;
    let n = shape.n();
    if n > 2 || shape.is_trivial() {
        return None;
    }
    let ell = shape.ell as f64;
    let (a, b) = if k == 0 { shape.profile.i1 } else { shape.profile.i2 };
    let w = (b - a) / ell;
    let start = if shape.unit_a[ax] > 0.0 { -0.5 + a / ell } else { -0.5 + (1.0 - b) / ell };
    let stripe = |h: f64, count: u64, shift: f64| AxisLattice {
        start: start + shift,
        h,
        count,
        stride: 1.0 / ell,
        groups: shape.ell,
    };
    let mut axes = vec![stripe(w, 1, 0.0); n];
    if n == 2 {
        let p = 1 - ax;
        let l = 1.0 - 2.0 * shape.margins[p];
        if w <= l {
            let c = num::floor(l / w).max(1.0);
            axes[p] = AxisLattice::single(-0.5 * c * w, w, c as u64);
        } else {
            let c = num::floor(w / l).max(1.0);
            axes[ax] = stripe(l, c as u64, 0.5 * (w - c * l));
            axes[p] = AxisLattice::single(-0.5 * l, l, 1);
        }
    }
    Some(Lattice { axes }.refine(refine))
}

/// `2^d` equal cells per axis covering the whole box.
pub fn dyadic_lattice(n: usize, d: u32) -> Lattice {
    let k = 1u64 << d;
    Lattice { axes: vec![AxisLattice::single(-0.5, 1.0 / k as f64, k); n] }
}
