//! Building blocks: compactly supported Lipschitz maps whose gradient pair
//! (Dφ, Ψ) oscillates between the two ends of a wave-cone segment.
//!
//! A block lives on a cube `Q`. Everything is computed in the local
//! coordinate `y = (x − c)/side ∈ (−½, ½)ⁿ`; the phase is
//! `t = ℓ(â·y) + t₀` and only physical `φ` carries the factor `side`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{periodic_slab_volume, segment_distance, Cube, GeomError, Mat, MatrixPair, Segment, WaveVector};
use crate::num;
use crate::rng;

/// Largest number of periods a block may use.
pub const ELL_CAP: u64 = 1 << 20;
/// Samples used by the containment check while searching for ℓ.
pub const CONTAINMENT_SAMPLES: usize = 10_000;
const MAX_TRANSITION: f64 = 0.02;
/// Largest slope of the smooth step, attained at `s = ½`.
pub const STEP_SLOPE_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub enum BlockError {
    InvalidLambda(f64),
    InvalidEps(f64),
    Geometry(GeomError),
    /// No admissible ℓ up to [`ELL_CAP`].
    EllCap { ell: u64, containment: f64, sup_phi: f64 },
}

impl fmt::Display for BlockError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockError::InvalidLambda(l) => write!(f, "lambda = {l} is outside [0, 1]"),
            BlockError::InvalidEps(e) => write!(f, "eps = {e} is outside (0, 1)"),
            BlockError::Geometry(g) => write!(f, "{g}"),
            BlockError::EllCap { ell, containment, sup_phi } => write!(
                f,
                "no admissible period count up to {ell} (containment error {containment:e}, sup|phi| {sup_phi:e})"
            ),
        }
    }
}

impl From<GeomError> for BlockError {
    fn from(e: GeomError) -> Self {
        BlockError::Geometry(e)
    }
}

/// `S(s) = e^{−1/s} / (e^{−1/s} + e^{−1/(1−s)})`, clamped to 0 and 1 outside (0, 1).
#[inline]
pub fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        1.0 / (1.0 + num::exp(1.0 / s - 1.0 / (1.0 - s)))
    }
}

/// `S′(s)`.
#[inline]
pub fn smooth_step_slope(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    let v = smooth_step(s);
    v * (1.0 - v) * (1.0 / (s * s) + 1.0 / ((1.0 - s) * (1.0 - s)))
}

const GL8_X: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_W: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Nodes and weights of the 8-point Gauss–Legendre rule on `[a, b]`.
pub fn gauss8_points(a: f64, b: f64) -> [(f64, f64); 8] {
    let (m, h) = (0.5 * (a + b), 0.5 * (b - a));
    let mut out = [(0.0, 0.0); 8];
    for k in 0..4 {
        out[2 * k] = (m - h * GL8_X[k], h * GL8_W[k]);
        out[2 * k + 1] = (m + h * GL8_X[k], h * GL8_W[k]);
    }
    out
}

/// 8-point Gauss–Legendre on `[a, b]`.
pub fn gauss8(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    gauss8_points(a, b).iter().map(|(x, w)| w * f(*x)).sum()
}

/// `∫₀ˢ S`, with `∫₀¹ S = ½` exactly by symmetry.
pub fn smooth_step_integral(s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 0.5 + (s - 1.0);
    }
    if s > 0.5 {
        return s - 0.5 + smooth_step_integral(1.0 - s);
    }
    const PIECES: usize = 8;
    let h = s / PIECES as f64;
    (0..PIECES).map(|k| gauss8(&smooth_step, k as f64 * h, (k + 1) as f64 * h)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Piece {
    Zero,
    Up,
    Flat,
    Down,
}

/// One-periodic profile `f` with `f′ = q`: `q = 1 − λ` on `I₁`, `q = −λ` on `I₂`,
/// smooth transitions in between, mean zero, `f ≥ 0` and `f = 0` near the integers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub lambda: f64,
    pub eps: f64,
    pub i1: (f64, f64),
    pub i2: (f64, f64),
    pub transition_width: f64,
    knots: [f64; 10],
    heights: [f64; 9],
    kinds: [Piece; 9],
    start_f: [f64; 9],
}

/// Plateau-length factor `c = (1 − eps)^{1/3}` shared by the profile and the cutoff.
pub fn plateau_factor(eps: f64) -> f64 {
    num::cbrt(1.0 - eps)
}

pub fn make_profile(lambda: f64, eps: f64) -> Result<Profile, BlockError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(BlockError::InvalidLambda(lambda));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(BlockError::InvalidEps(eps));
    }
    let c = plateau_factor(eps);
    let b = 1.0 - c;
    let w = MAX_TRANSITION.min(b / 8.0);
    let z = b - 2.0 * w;
    let (l, m) = (lambda, 1.0 - lambda);
    let widths = [z / 4.0, l * w, c * l, l * w, z / 2.0, m * w, c * m, m * w, z / 4.0];
    let heights = [0.0, m, m, m, 0.0, -l, -l, -l, 0.0];
    let kinds = [
        Piece::Zero,
        Piece::Up,
        Piece::Flat,
        Piece::Down,
        Piece::Zero,
        Piece::Up,
        Piece::Flat,
        Piece::Down,
        Piece::Zero,
    ];
    let mut knots = [0.0; 10];
    for k in 0..9 {
        knots[k + 1] = knots[k] + widths[k];
    }
    knots[9] = 1.0;
    let mut start_f = [0.0; 9];
    for k in 0..8 {
        let full = match kinds[k] {
            Piece::Zero => 0.0,
            Piece::Flat => heights[k] * widths[k],
            Piece::Up | Piece::Down => 0.5 * heights[k] * widths[k],
        };
        start_f[k + 1] = start_f[k] + full;
    }
    start_f[8] = 0.0;
    Ok(Profile {
        lambda,
        eps,
        i1: (knots[2], knots[3]),
        i2: (knots[6], knots[7]),
        transition_width: w,
        knots,
        heights,
        kinds,
        start_f,
    })
}

impl Profile {
    /// `λ ∈ {0, 1}`: the profile is identically zero.
    pub fn is_trivial(&self) -> bool {
        self.lambda == 0.0 || self.lambda == 1.0
    }

    /// Index of the piece containing the phase fraction `s ∈ [0, 1)`.
    fn piece(&self, s: f64) -> usize {
        let mut k = 0;
        while k < 8 && s >= self.knots[k + 1] {
            k += 1;
        }
        k
    }

    /// `q(s) = f′(s)`.
    pub fn q(&self, s: f64) -> f64 {
        if self.is_trivial() {
            return 0.0;
        }
        let s = num::frac(s);
        let k = self.piece(s);
        let (a, b) = (self.knots[k], self.knots[k + 1]);
        match self.kinds[k] {
            Piece::Zero => 0.0,
            Piece::Flat => self.heights[k],
            Piece::Up => self.heights[k] * smooth_step((s - a) / (b - a)),
            Piece::Down => self.heights[k] * smooth_step((b - s) / (b - a)),
        }
    }

    /// `f(s) = ∫₀ˢ q`.
    pub fn f(&self, s: f64) -> f64 {
        if self.is_trivial() {
            return 0.0;
        }
        let s = num::frac(s);
        let k = self.piece(s);
        let (a, b) = (self.knots[k], self.knots[k + 1]);
        let (v, w) = (self.heights[k], b - a);
        match self.kinds[k] {
            Piece::Zero => self.start_f[k],
            Piece::Flat => self.start_f[k] + v * (s - a),
            Piece::Up => self.start_f[k] + v * w * smooth_step_integral((s - a) / w),
            // Integrated from the right end so the last transition lands on zero.
            Piece::Down => {
                let r = (b - s) / w;
                self.start_f[k + 1] - v * w * smooth_step_integral(r)
            }
        }
    }

    /// `max f = λ(1 − λ)(c + w)`, reached between the two plateaus.
    pub fn max_f(&self) -> f64 {
        if self.is_trivial() {
            return 0.0;
        }
        self.start_f[4]
    }

    /// Smallest transition width, which sets the scale for finite differences.
    pub fn min_transition(&self) -> f64 {
        let l = self.lambda.min(1.0 - self.lambda);
        if l > 0.0 {
            l * self.transition_width
        } else {
            self.transition_width
        }
    }

    /// `Some(0)` on `I₁`, `Some(1)` on `I₂` (closed intervals).
    pub fn plateau(&self, s: f64) -> Option<usize> {
        if self.is_trivial() {
            return None;
        }
        let s = num::frac(s);
        if s >= self.i1.0 && s <= self.i1.1 {
            Some(0)
        } else if s >= self.i2.0 && s <= self.i2.1 {
            Some(1)
        } else {
            None
        }
    }

    pub fn knots(&self) -> &[f64; 10] {
        &self.knots
    }
}

/// `(φ̂, Dφ, Ψ)` at one point; physical `φ = side·φ̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalValue {
    pub phi_hat: Vec<f64>,
    pub dphi: Mat,
    pub psi: Mat,
}

impl LocalValue {
    pub fn zero(m: usize, n: usize) -> Self {
        LocalValue { phi_hat: vec![0.0; m], dphi: Mat::zeros(m, n), psi: Mat::zeros(m, n) }
    }

    pub fn pair(&self) -> MatrixPair {
        MatrixPair::new(self.dphi.clone(), self.psi.clone())
    }
}

/// Scale-free block: everything except the physical cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockShape {
    pub gamma: WaveVector,
    pub lambda: f64,
    pub eps: f64,
    pub profile: Profile,
    pub ell: u64,
    /// Coordinate axis of `a` when it is axis-aligned.
    pub axis: Option<usize>,
    pub unit_a: Vec<f64>,
    pub a_norm: f64,
    /// Cutoff margin per axis, as a fraction of the side; 0 means no cutoff.
    pub margins: Vec<f64>,
    pub phase_offset: f64,
    /// Exact `|G′|/|Q|` and `|G″|/|Q|`.
    pub fractions: [f64; 2],
}

fn shift_intervals(iv: (f64, f64), s0: f64) -> Vec<(f64, f64)> {
    let (a, b) = (iv.0 - s0, iv.1 - s0);
    if a >= 0.0 {
        vec![(a, b)]
    } else if b <= 0.0 {
        vec![(a + 1.0, b + 1.0)]
    } else {
        vec![(0.0, b), (a + 1.0, 1.0)]
    }
}

impl BlockShape {
    pub fn new(gamma: &WaveVector, lambda: f64, eps: f64, ell: u64) -> Result<Self, BlockError> {
        let profile = make_profile(lambda, eps)?;
        let n = gamma.n();
        let a_norm = num::norm(&gamma.a);
        if !(a_norm > 0.0) {
            return Err(GeomError::ZeroDirection.into());
        }
        let unit_a: Vec<f64> = gamma.a.iter().map(|v| v / a_norm).collect();
        let nonzero: Vec<usize> = (0..n).filter(|i| unit_a[*i] != 0.0).collect();
        let axis = if nonzero.len() == 1 { Some(nonzero[0]) } else { None };
        let c = plateau_factor(eps);
        let margins: Vec<f64> = match axis {
            Some(k) if n > 1 => {
                let m = 0.5 * (1.0 - num::pow(c, 1.0 / (n - 1) as f64));
                (0..n).map(|i| if i == k { 0.0 } else { m }).collect()
            }
            Some(_) => vec![0.0; n],
            None => vec![0.5 * (1.0 - num::pow(c, 1.0 / n as f64)); n],
        };
        let l = ell as f64;
        let phase_offset = l * unit_a.iter().map(|v| num::abs(*v)).sum::<f64>() / 2.0;
        let mut shape = BlockShape {
            gamma: gamma.clone(),
            lambda,
            eps,
            profile,
            ell,
            axis,
            unit_a,
            a_norm,
            margins,
            phase_offset,
            fractions: [0.0, 0.0],
        };
        shape.fractions = shape.exact_fractions()?;
        Ok(shape)
    }

    pub fn m(&self) -> usize {
        self.gamma.m()
    }

    pub fn n(&self) -> usize {
        self.gamma.n()
    }

    pub fn is_trivial(&self) -> bool {
        self.profile.is_trivial()
    }

    fn exact_fractions(&self) -> Result<[f64; 2], GeomError> {
        let n = self.n();
        if self.is_trivial() {
            return Ok(if self.lambda == 1.0 { [1.0, 0.0] } else { [0.0, 1.0] });
        }
        let delta = 1.0 / self.ell as f64;
        let ivs = [self.profile.i1, self.profile.i2];
        let mut out = [0.0; 2];
        match self.axis {
            Some(_) => {
                let perp: f64 = self.margins.iter().map(|m| 1.0 - 2.0 * m).product();
                for k in 0..2 {
                    out[k] = periodic_slab_volume(&Cube::unit(n), &self.unit_a, delta, &[ivs[k]], ELL_CAP * 4)? * perp;
                }
            }
            None => {
                let inner = Cube::new(vec![0.5; n], 0.5 - self.margins[0]);
                let neg: f64 = self.unit_a.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
                let s0 = num::frac(self.ell as f64 * neg);
                for k in 0..2 {
                    let iv = shift_intervals(ivs[k], s0);
                    out[k] = periodic_slab_volume(&inner, &self.unit_a, delta, &iv, ELL_CAP * 4)?;
                }
            }
        }
        Ok(out)
    }

    /// Phase `t(y)`.
    #[inline]
    pub fn phase(&self, y: &[f64]) -> f64 {
        self.ell as f64 * num::dot(&self.unit_a, y) + self.phase_offset
    }

    pub fn in_box(y: &[f64]) -> bool {
        y.iter().all(|v| *v > -0.5 && *v < 0.5)
    }

    /// Inside the inner box `G̃`, where `ζ = 1`.
    pub fn in_inner(&self, y: &[f64]) -> bool {
        y.iter().zip(&self.margins).all(|(v, m)| num::abs(*v) <= 0.5 - m && num::abs(*v) < 0.5)
    }

    /// Cutoff `ζ(y)` and `D_yζ`.
    pub fn cutoff(&self, y: &[f64]) -> (f64, Vec<f64>) {
        let n = y.len();
        let mut vals = vec![1.0; n];
        let mut ders = vec![0.0; n];
        for i in 0..n {
            let m = self.margins[i];
            if m == 0.0 {
                continue;
            }
            let (l, r) = ((y[i] + 0.5) / m, (0.5 - y[i]) / m);
            let (sl, sr) = (smooth_step(l), smooth_step(r));
            vals[i] = sl * sr;
            ders[i] = (smooth_step_slope(l) * sr - sl * smooth_step_slope(r)) / m;
        }
        let z: f64 = vals.iter().product();
        let grad = (0..n)
            .map(|i| {
                if ders[i] == 0.0 {
                    return 0.0;
                }
                let others: f64 = (0..n).filter(|j| *j != i).map(|j| vals[j]).product();
                ders[i] * others
            })
            .collect();
        (z, grad)
    }

    /// Bound on `|D_yζ|`.
    pub fn cutoff_slope_bound(&self) -> f64 {
        num::sqrt(
            self.margins
                .iter()
                .filter(|m| **m > 0.0)
                .map(|m| (STEP_SLOPE_MAX / m) * (STEP_SLOPE_MAX / m))
                .sum(),
        )
    }

    /// Closed form at phase fraction `s` (consistent with `y`) and local point `y`.
    pub fn eval_parts(&self, s: f64, y: &[f64]) -> LocalValue {
        let (m, n) = (self.m(), self.n());
        if self.is_trivial() {
            return LocalValue::zero(m, n);
        }
        let (z, dz) = self.cutoff(y);
        let q = self.profile.q(s);
        let f = self.profile.f(s);
        let l = self.ell as f64;
        let g = &self.gamma;
        let mut out = LocalValue::zero(m, n);
        let amp = self.a_norm / l;
        for i in 0..m {
            out.phi_hat[i] = amp * z * f * g.p[i];
        }
        let a_dz = num::dot(&g.a, &dz);
        let b_dz = g.b.apply(&dz);
        let k = f / (l * self.a_norm);
        for i in 0..m {
            for j in 0..n {
                out.dphi.set(i, j, z * q * g.p[i] * g.a[j] + amp * f * g.p[i] * dz[j]);
                out.psi.set(i, j, z * q * g.b.get(i, j) + k * (a_dz * g.b.get(i, j) - b_dz[i] * g.a[j]));
            }
        }
        out
    }

    /// Closed form at a local point; zero outside the open unit box.
    pub fn eval_local(&self, y: &[f64]) -> LocalValue {
        if !Self::in_box(y) || self.is_trivial() {
            return LocalValue::zero(self.m(), self.n());
        }
        self.eval_parts(num::frac(self.phase(y)), y)
    }

    /// Plateau slot of a local point: 0 for `G′`, 1 for `G″`.
    pub fn plateau_slot(&self, y: &[f64]) -> Option<usize> {
        if !Self::in_box(y) {
            return None;
        }
        if self.is_trivial() {
            return Some(if self.lambda == 1.0 { 0 } else { 1 });
        }
        if !self.in_inner(y) {
            return None;
        }
        self.profile.plateau(self.phase(y))
    }

    /// Offset from the base pair on slot `k`: `(1 − λ)γ` or `−λγ`.
    pub fn slot_offset(&self, k: usize) -> MatrixPair {
        let w = if k == 0 { 1.0 - self.lambda } else { -self.lambda };
        self.gamma.to_pair().scale(w)
    }

    pub fn segment(&self) -> Segment {
        Segment { alpha: self.slot_offset(1), beta: self.slot_offset(0) }
    }

    /// `sup|φ̂|`, attained where `ζ = 1`.
    pub fn sup_phi_hat(&self) -> f64 {
        self.a_norm / self.ell as f64 * self.profile.max_f() * num::norm(&self.gamma.p)
    }

    /// Bound on the distance of `(Dφ, Ψ)` to the segment, from the cutoff terms.
    pub fn containment_bound(&self) -> f64 {
        let g = &self.gamma;
        let pa = num::norm(&g.p) * self.a_norm;
        self.profile.max_f() * self.cutoff_slope_bound() * (pa + 2.0 * g.b.norm()) / self.ell as f64
    }

    /// Sampled max distance of `(Dφ, Ψ)` to the segment; half the samples sit in the margins.
    pub fn sampled_containment(&self, samples: usize, seed: u64) -> f64 {
        let n = self.n();
        let seg = self.segment();
        let axes: Vec<usize> = (0..n).filter(|i| self.margins[*i] > 0.0).collect();
        let mut r = rng::stream(seed, 0x626c6b);
        let mut worst: f64 = 0.0;
        for k in 0..samples {
            let mut y: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r) - 0.5).collect();
            if k % 2 == 1 && !axes.is_empty() {
                let i = axes[rng::index(&mut r, axes.len())];
                let m = self.margins[i];
                let off = 0.5 - m * rng::uniform(&mut r);
                y[i] = if rng::uniform(&mut r) < 0.5 { off } else { -off };
            }
            let d = segment_distance(&self.eval_local(&y).pair(), &seg);
            worst = worst.max(d);
        }
        worst
    }
}

/// Outcome of the three construction checks for one ℓ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockChecks {
    pub ell: u64,
    /// Sampled max distance of `(Dφ, Ψ)` to the segment.
    pub containment: f64,
    /// `sup|φ|` in physical units.
    pub sup_phi: f64,
    pub measures: [f64; 2],
    pub required: [f64; 2],
}

impl BlockChecks {
    pub fn pass(&self, eps: f64) -> bool {
        self.containment < eps
            && self.sup_phi < eps
            && self.measures[0] >= self.required[0]
            && self.measures[1] >= self.required[1]
    }
}

/// Plateau region `G̃ ∩ {frac(t) ∈ I}` with its pinned offset and exact measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauRegion {
    pub phase: (f64, f64),
    pub offset: MatrixPair,
    pub measure: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildingBlock {
    pub shape: BlockShape,
    pub cube: Cube,
    /// Oscillation scale `δ = |a|·side/ℓ`; the period along `â` is `side/ℓ`.
    pub delta: f64,
    pub plateau_regions: [PlateauRegion; 2],
    pub checks: BlockChecks,
}

impl BuildingBlock {
    pub fn gamma(&self) -> &WaveVector {
        &self.shape.gamma
    }

    pub fn lambda(&self) -> f64 {
        self.shape.lambda
    }

    pub fn ell(&self) -> u64 {
        self.shape.ell
    }
}

fn check_shape(shape: &BlockShape, cube: &Cube, seed: u64) -> BlockChecks {
    let vol = cube.volume();
    let l = shape.lambda;
    let containment = if shape.is_trivial() {
        0.0
    } else if shape.margins.iter().all(|m| *m == 0.0) {
        // Without a cutoff the pair is `q(t)γ`, on the segment by construction.
        0.0
    } else {
        shape.sampled_containment(CONTAINMENT_SAMPLES, seed)
    };
    BlockChecks {
        ell: shape.ell,
        containment,
        sup_phi: cube.side() * shape.sup_phi_hat(),
        measures: [shape.fractions[0] * vol, shape.fractions[1] * vol],
        required: [(1.0 - shape.eps) * l * vol, (1.0 - shape.eps) * (1.0 - l) * vol],
    }
}

fn assemble(shape: BlockShape, cube: &Cube, checks: BlockChecks) -> BuildingBlock {
    let side = cube.side();
    let p = &shape.profile;
    let plateau_regions = [
        PlateauRegion { phase: p.i1, offset: shape.slot_offset(0), measure: checks.measures[0] },
        PlateauRegion { phase: p.i2, offset: shape.slot_offset(1), measure: checks.measures[1] },
    ];
    BuildingBlock {
        delta: shape.a_norm * side / shape.ell as f64,
        shape,
        cube: cube.clone(),
        plateau_regions,
        checks,
    }
}

/// Smallest ℓ at which the analytic bounds on `sup|φ|` and on the cutoff
/// error are below `eps/2`.
fn analytic_ell(shape: &BlockShape, side: f64) -> f64 {
    let l = shape.ell as f64;
    let need_phi = 2.0 * side * shape.sup_phi_hat() * l / shape.eps;
    let need_cut = 2.0 * shape.containment_bound() * l / shape.eps;
    need_phi.max(need_cut)
}

/// Number of periods to start the search from: the smaller of
/// `⌈8(1 + ‖Dζ‖∞·diam)/eps⌉` and the analytic bound.
pub fn initial_ell(gamma: &WaveVector, lambda: f64, cube: &Cube, eps: f64) -> Result<u64, BlockError> {
    let probe = BlockShape::new(gamma, lambda, eps, 1)?;
    let diam = num::sqrt(gamma.n() as f64);
    let heuristic = num::ceil(8.0 * (1.0 + probe.cutoff_slope_bound() * diam) / eps);
    let analytic = num::ceil(analytic_ell(&probe, cube.side()));
    Ok(heuristic.min(analytic).max(1.0).min(ELL_CAP as f64 * 2.0) as u64)
}

/// Builds the block, doubling ℓ until checks (a)–(c) pass.
pub fn make_block(gamma: &WaveVector, lambda: f64, cube: &Cube, eps: f64) -> Result<BuildingBlock, BlockError> {
    make_block_seeded(gamma, lambda, cube, eps, 0)
}

pub fn make_block_seeded(
    gamma: &WaveVector,
    lambda: f64,
    cube: &Cube,
    eps: f64,
    seed: u64,
) -> Result<BuildingBlock, BlockError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(BlockError::InvalidLambda(lambda));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(BlockError::InvalidEps(eps));
    }
    if lambda == 0.0 || lambda == 1.0 {
        let shape = BlockShape::new(gamma, lambda, eps, 1)?;
        let checks = check_shape(&shape, cube, seed);
        return Ok(assemble(shape, cube, checks));
    }
    let mut ell = initial_ell(gamma, lambda, cube, eps)?;
    let mut last = None;
    while ell <= ELL_CAP {
        let shape = BlockShape::new(gamma, lambda, eps, ell)?;
        let checks = check_shape(&shape, cube, seed);
        if checks.pass(eps) {
            return Ok(assemble(shape, cube, checks));
        }
        last = Some(checks);
        ell *= 2;
    }
    let (containment, sup_phi) = last.map_or((f64::INFINITY, f64::INFINITY), |c| (c.containment, c.sup_phi));
    Err(BlockError::EllCap { ell: ELL_CAP, containment, sup_phi })
}

/// Builds the block at a fixed ℓ; checks are recorded but not enforced.
pub fn make_block_with_ell(
    gamma: &WaveVector,
    lambda: f64,
    cube: &Cube,
    eps: f64,
    ell: u64,
) -> Result<BuildingBlock, BlockError> {
    let shape = BlockShape::new(gamma, lambda, eps, ell.max(1))?;
    let checks = check_shape(&shape, cube, 0);
    Ok(assemble(shape, cube, checks))
}

/// `(φ, Dφ, Ψ)` at a physical point; zero outside the box.
pub fn eval_block(blk: &BuildingBlock, x: &[f64]) -> (Vec<f64>, Mat, Mat) {
    let y = blk.cube.to_local(x);
    let v = blk.shape.eval_local(&y);
    let side = blk.cube.side();
    (v.phi_hat.iter().map(|p| p * side).collect(), v.dphi, v.psi)
}

/// Fourth-order central difference from samples at `−2h, −h, h, 2h`.
#[inline]
pub fn five_point(fm2: f64, fm1: f64, fp1: f64, fp2: f64, h: f64) -> f64 {
    (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * h)
}

/// Local point together with its phase fraction, so that shifts along the
/// phase stay exact at large ℓ.
fn shifted(shape: &BlockShape, s: f64, y: &[f64], j: usize, h: f64) -> LocalValue {
    let mut yy = y.to_vec();
    yy[j] += h;
    let ds = shape.ell as f64 * shape.unit_a[j] * h;
    shape.eval_parts(num::frac(s + ds), &yy)
}

/// Interior sample with its phase fraction.
fn interior_sample(shape: &BlockShape, r: &mut rng::Rng) -> (f64, Vec<f64>) {
    let y: Vec<f64> = (0..shape.n()).map(|_| 0.98 * (rng::uniform(r) - 0.5)).collect();
    (num::frac(shape.phase(&y)), y)
}

/// Max of `‖Dφ − FD(φ)‖ / (1 + ‖Dφ‖)` over random points, step `1e−6` periods.
pub fn fd_gradient_error(shape: &BlockShape, samples: usize, seed: u64) -> f64 {
    let (m, n) = (shape.m(), shape.n());
    let h = 1e-6 / shape.ell as f64;
    let mut r = rng::stream(seed, 0x6664);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let (s, y) = interior_sample(shape, &mut r);
        let v = shape.eval_parts(s, &y);
        let mut fd = Mat::zeros(m, n);
        for j in 0..n {
            let e: Vec<LocalValue> = [-2.0, -1.0, 1.0, 2.0].iter().map(|k| shifted(shape, s, &y, j, k * h)).collect();
            for i in 0..m {
                fd.set(i, j, five_point(e[0].phi_hat[i], e[1].phi_hat[i], e[2].phi_hat[i], e[3].phi_hat[i], h));
            }
        }
        let mut d2 = 0.0;
        for k in 0..m * n {
            let d = fd.data[k] - v.dphi.data[k];
            d2 += d * d;
        }
        worst = worst.max(num::sqrt(d2) / (1.0 + v.dphi.norm()));
    }
    worst
}

/// Max row-wise `|div Ψ|` over random points, in units of `ℓ·(1 + ‖Ψ‖∞)`.
pub fn fd_divergence_residual(shape: &BlockShape, samples: usize, seed: u64) -> f64 {
    let (m, n) = (shape.m(), shape.n());
    if shape.is_trivial() {
        return 0.0;
    }
    let h = (1e-3 * shape.profile.min_transition()).min(1e-6) / shape.ell as f64;
    let mut r = rng::stream(seed, 0x6476);
    let mut worst: f64 = 0.0;
    let mut psi_max: f64 = 0.0;
    let mut res = vec![0.0; m];
    for _ in 0..samples {
        let (s, y) = interior_sample(shape, &mut r);
        psi_max = psi_max.max(shape.eval_parts(s, &y).psi.data.iter().fold(0.0, |a, v| a.max(num::abs(*v))));
        res.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            let e: Vec<LocalValue> = [-2.0, -1.0, 1.0, 2.0].iter().map(|k| shifted(shape, s, &y, j, k * h)).collect();
            for (i, acc) in res.iter_mut().enumerate() {
                *acc += five_point(e[0].psi.get(i, j), e[1].psi.get(i, j), e[2].psi.get(i, j), e[3].psi.get(i, j), h);
            }
        }
        worst = worst.max(num::max_abs(&res));
    }
    worst / (shape.ell as f64 * (1.0 + psi_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mc_measure;
    use proptest::prelude::*;

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for k in 1..n {
            acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    fn integrate_q(p: &Profile) -> f64 {
        let k = p.knots();
        (0..9).map(|i| (0..16).map(|j| {
            let (a, b) = (k[i], k[i + 1]);
            let h = (b - a) / 16.0;
            gauss8(&|s| p.q(s), a + j as f64 * h, a + (j + 1) as f64 * h)
        }).sum::<f64>()).sum()
    }

    pub(crate) fn gamma_2d() -> WaveVector {
        WaveVector::new(vec![1.0], vec![1.0, 0.0], Mat::from_rows(1, 2, &[0.0, 1.0])).unwrap()
    }

    fn gamma_oblique() -> WaveVector {
        WaveVector::new(vec![0.7], vec![1.0, 1.0], Mat::from_rows(1, 2, &[0.5, -0.5])).unwrap()
    }

    fn gamma_1d() -> WaveVector {
        WaveVector::new(vec![2.0], vec![1.0], Mat::zeros(1, 1)).unwrap()
    }

    #[test]
    fn step_integral_matches_simpson() {
        for s in [0.05, 0.3, 0.5, 0.77, 1.0] {
            let oracle = simpson(&smooth_step, 0.0, s, 200_000);
            assert!((smooth_step_integral(s) - oracle).abs() < 1e-12, "s={s}");
        }
        assert_eq!(smooth_step_integral(1.0), 0.5);
    }

    #[test]
    fn step_slope_peaks_at_half() {
        let peak = (1..10_000).map(|k| smooth_step_slope(k as f64 / 10_000.0)).fold(0.0, f64::max);
        assert!((peak - STEP_SLOPE_MAX).abs() < 1e-6);
    }

    #[test]
    fn trivial_profile_is_zero() {
        let p = make_profile(0.0, 0.2).unwrap();
        assert!(p.is_trivial());
        assert_eq!(p.q(0.3), 0.0);
        assert_eq!(p.f(0.7), 0.0);
    }

    #[test]
    fn half_profile_lengths_and_mean() {
        let p = make_profile(0.5, 0.1).unwrap();
        let want = 0.9f64.cbrt() / 2.0;
        assert!((p.i1.1 - p.i1.0 - want).abs() < 1e-15);
        assert!((p.i2.1 - p.i2.0 - want).abs() < 1e-15);
        assert!((want - 0.48275).abs() < 1e-5);
        assert!(integrate_q(&p).abs() < 1e-12);
    }

    #[test]
    fn plateau_preimages_have_exact_lengths() {
        for (l, e) in [(0.3, 0.05), (0.8, 0.4), (0.5, 0.1)] {
            let p = make_profile(l, e).unwrap();
            let c = plateau_factor(e);
            let cube = Cube::unit(1);
            let m1 = periodic_slab_volume(&cube, &[1.0], 1.0, &[p.i1], 8).unwrap();
            let m2 = periodic_slab_volume(&cube, &[1.0], 1.0, &[p.i2], 8).unwrap();
            assert!((m1 - c * l).abs() < 1e-14 && (m2 - c * (1.0 - l)).abs() < 1e-14);
            let mid = |iv: (f64, f64)| 0.5 * (iv.0 + iv.1);
            assert_eq!(p.q(mid(p.i1)), 1.0 - l);
            assert_eq!(p.q(mid(p.i2)), -l);
        }
    }

    #[test]
    fn antiderivative_matches_quadrature() {
        let p = make_profile(0.35, 0.2).unwrap();
        for s in [0.01, 0.02, 0.1, 0.3, 0.5, 0.62, 0.9, 0.999] {
            let oracle = simpson(&|t| p.q(t), 0.0, s, 400_000);
            assert!((p.f(s) - oracle).abs() < 1e-9, "s={s}: {} vs {oracle}", p.f(s));
        }
        assert_eq!(p.f(0.9999), 0.0);
        let fmax = (0..10_000).map(|k| p.f(k as f64 / 1e4)).fold(0.0, f64::max);
        assert!((fmax - p.max_f()).abs() < 1e-12);
    }

    #[test]
    fn outside_box_is_zero() {
        let blk = make_block(&gamma_2d(), 0.5, &Cube::unit(2), 0.1).unwrap();
        let (phi, d, psi) = eval_block(&blk, &[1.2, 0.5]);
        assert_eq!(phi, vec![0.0]);
        assert_eq!(d.norm() + psi.norm(), 0.0);
    }

    #[test]
    fn zero_lambda_gives_zero_block() {
        let cube = Cube::new(vec![0.3, 0.3], 0.1);
        let blk = make_block(&gamma_2d(), 0.0, &cube, 0.1).unwrap();
        assert!(blk.checks.measures[1] >= 0.9 * cube.volume());
        let (phi, d, psi) = eval_block(&blk, &[0.31, 0.28]);
        assert_eq!(phi[0] + d.norm() + psi.norm(), 0.0);
    }

    #[test]
    fn half_split_unit_box_measures() {
        let blk = make_block(&gamma_2d(), 0.5, &Cube::unit(2), 0.1).unwrap();
        assert!(blk.checks.measures[0] >= 0.45 && blk.checks.measures[1] >= 0.45);
        for k in 0..2 {
            let ind = |x: &[f64]| blk.shape.plateau_slot(&blk.cube.to_local(x)) == Some(k);
            let (est, hw) = mc_measure(&ind, &blk.cube, 200_000, 7 + k as u64);
            assert!((est - blk.checks.measures[k]).abs() < hw + 1e-3, "slot {k}: {est} vs {}", blk.checks.measures[k]);
        }
    }

    #[test]
    fn plateaus_are_exact() {
        let blk = make_block(&gamma_2d(), 0.4, &Cube::new(vec![0.5, 0.5], 0.25), 0.2).unwrap();
        let mut r = rng::stream(3, 0);
        let mut seen = [0, 0];
        for _ in 0..4000 {
            let x = blk.cube.sample(&mut r);
            let y = blk.cube.to_local(&x);
            if let Some(k) = blk.shape.plateau_slot(&y) {
                seen[k] += 1;
                let (_, d, psi) = eval_block(&blk, &x);
                let got = MatrixPair::new(d, psi);
                assert!(got.dist(&blk.shape.slot_offset(k)) < 1e-12);
            }
        }
        assert!(seen[0] > 0 && seen[1] > 0);
    }

    #[test]
    fn axis_example_is_f_prime_times_gamma() {
        // p = 1, a = e₁, B = e₂: on the inner box Ψ = (−∂₂h, ∂₁h)·δ and (Dφ, Ψ) = q·γ.
        let blk = make_block(&gamma_2d(), 0.3, &Cube::unit(2), 0.1).unwrap();
        let y = [0.123, 0.0];
        let s = num::frac(blk.shape.phase(&y));
        let v = blk.shape.eval_local(&y);
        let q = blk.shape.profile.q(s);
        assert!((v.dphi.get(0, 0) - q).abs() < 1e-15 && v.dphi.get(0, 1).abs() < 1e-15);
        assert!((v.psi.get(0, 1) - q).abs() < 1e-15 && v.psi.get(0, 0).abs() < 1e-15);
    }

    #[test]
    fn fd_checks_hold() {
        for g in [gamma_1d(), gamma_2d(), gamma_oblique()] {
            for (l, e) in [(0.5, 0.1), (0.2, 0.3)] {
                let blk = make_block(&g, l, &Cube::unit(g.n()), e).unwrap();
                let eg = fd_gradient_error(&blk.shape, 1000, 1);
                let ed = fd_divergence_residual(&blk.shape, 1000, 2);
                assert!(eg <= 1e-6, "gradient FD error {eg}");
                assert!(ed <= 1e-6, "divergence residual {ed}");
            }
        }
    }

    #[test]
    fn oblique_block_passes_checks() {
        let blk = make_block(&gamma_oblique(), 0.6, &Cube::unit(2), 0.2).unwrap();
        assert!(blk.shape.axis.is_none());
        assert!(blk.checks.pass(0.2), "{:?}", blk.checks);
        let ind = |x: &[f64]| blk.shape.plateau_slot(&blk.cube.to_local(x)) == Some(0);
        let (est, hw) = mc_measure(&ind, &blk.cube, 100_000, 9);
        assert!((est - blk.checks.measures[0]).abs() < hw + 1e-3);
    }

    #[test]
    fn small_box_needs_few_periods() {
        let blk = make_block(&gamma_1d(), 0.5, &Cube::new(vec![0.5], 1e-4), 0.01).unwrap();
        assert!(blk.ell() < 8);
        assert!(blk.checks.sup_phi < 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_blocks_satisfy_contract(
            l in 0.05f64..0.95, e in 0.05f64..0.5,
            p in -2.0f64..2.0, b in -2.0f64..2.0, two in any::<bool>(),
            cx in 0.2f64..0.8, r in 0.01f64..0.2,
        ) {
            let p = if p.abs() < 0.1 { 1.0 } else { p };
            let (g, cube) = if two {
                (WaveVector::new(vec![p], vec![0.0, 1.0], Mat::from_rows(1, 2, &[b, 0.0])).unwrap(),
                 Cube::new(vec![cx, 1.0 - cx], r))
            } else {
                (WaveVector::new(vec![p], vec![1.0], Mat::zeros(1, 1)).unwrap(), Cube::new(vec![cx], r))
            };
            let blk = make_block(&g, l, &cube, e).unwrap();
            prop_assert!(blk.checks.pass(e));
            prop_assert!(blk.checks.measures[0] >= (1.0 - e) * l * cube.volume());
            prop_assert!(fd_divergence_residual(&blk.shape, 200, 5) <= 1e-6);
        }

        #[test]
        fn profile_mean_zero_and_bounds(l in 0.01f64..0.99, e in 0.01f64..0.9, s in 0.0f64..1.0) {
            let p = make_profile(l, e).unwrap();
            prop_assert!(integrate_q(&p).abs() < 1e-12);
            let q = p.q(s);
            prop_assert!(q >= -l && q <= 1.0 - l);
            prop_assert!(p.f(s) >= -1e-15);
        }
    }
}
