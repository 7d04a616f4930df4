//! Matrix pairs, the wave cone, boxes, exact and Monte-Carlo measures, cube covers.

use alloc::vec::Vec;
use core::fmt;
use core::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::num;
use crate::rng;

pub type Buf = SmallVec<[f64; 4]>;

/// Dense real matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Buf,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: SmallVec::from_elem(0.0, rows * cols) }
    }

    pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data: SmallVec::from_slice(data) }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn norm(&self) -> f64 {
        num::norm(&self.data)
    }

    /// `B·a` for an n-vector `a`.
    pub fn apply(&self, a: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| (0..self.cols).map(|j| self.get(i, j) * a[j]).sum()).collect()
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }
}

/// A point (ξ¹, ξ²) of R^{m×n} × R^{m×n}: gradient slot and flux slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixPair {
    pub first: Mat,
    pub second: Mat,
}

impl MatrixPair {
    pub fn zeros(m: usize, n: usize) -> Self {
        MatrixPair { first: Mat::zeros(m, n), second: Mat::zeros(m, n) }
    }

    pub fn new(first: Mat, second: Mat) -> Self {
        assert_eq!((first.rows, first.cols), (second.rows, second.cols), "pair shapes");
        MatrixPair { first, second }
    }

    /// Scalar pair for m = n = 1.
    pub fn scalar(a: f64, b: f64) -> Self {
        MatrixPair::new(Mat::from_rows(1, 1, &[a]), Mat::from_rows(1, 1, &[b]))
    }

    pub fn m(&self) -> usize {
        self.first.rows
    }

    pub fn n(&self) -> usize {
        self.first.cols
    }

    /// Length of the flattened coordinate vector, 2mn.
    pub fn dim(&self) -> usize {
        2 * self.first.data.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.first.data.iter().chain(self.second.data.iter()).copied().collect()
    }

    pub fn from_slice(m: usize, n: usize, v: &[f64]) -> Self {
        let k = m * n;
        assert_eq!(v.len(), 2 * k, "pair vector length");
        MatrixPair::new(Mat::from_rows(m, n, &v[..k]), Mat::from_rows(m, n, &v[k..]))
    }

    pub fn coords(&self) -> impl Iterator<Item = f64> + '_ {
        self.first.data.iter().chain(self.second.data.iter()).copied()
    }

    pub fn norm(&self) -> f64 {
        num::sqrt(self.coords().map(|v| v * v).sum())
    }

    pub fn dist(&self, other: &MatrixPair) -> f64 {
        num::sqrt(self.coords().zip(other.coords()).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn dot(&self, other: &MatrixPair) -> f64 {
        self.coords().zip(other.coords()).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.coords().all(f64::is_finite)
    }

    fn zip_with(&self, o: &MatrixPair, f: impl Fn(f64, f64) -> f64) -> MatrixPair {
        let z = |x: &Mat, y: &Mat| Mat {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(y.data.iter()).map(|(a, b)| f(*a, *b)).collect(),
        };
        MatrixPair { first: z(&self.first, &o.first), second: z(&self.second, &o.second) }
    }

    pub fn scale(&self, s: f64) -> MatrixPair {
        MatrixPair { first: self.first.scale(s), second: self.second.scale(s) }
    }

    /// `self + s·o`.
    pub fn axpy(&self, s: f64, o: &MatrixPair) -> MatrixPair {
        self.zip_with(o, |a, b| a + s * b)
    }

    /// Convex combination `t·self + (1−t)·o`.
    pub fn lerp(&self, t: f64, o: &MatrixPair) -> MatrixPair {
        self.zip_with(o, |a, b| t * a + (1.0 - t) * b)
    }

    /// Bitwise key used for memoizing by value.
    pub fn key(&self) -> Vec<u64> {
        self.coords().map(|v| if v == 0.0 { 0 } else { v.to_bits() }).collect()
    }
}

impl Add for &MatrixPair {
    type Output = MatrixPair;
    fn add(self, o: &MatrixPair) -> MatrixPair {
        self.zip_with(o, |a, b| a + b)
    }
}

impl Sub for &MatrixPair {
    type Output = MatrixPair;
    fn sub(self, o: &MatrixPair) -> MatrixPair {
        self.zip_with(o, |a, b| a - b)
    }
}

impl Mul<f64> for &MatrixPair {
    type Output = MatrixPair;
    fn mul(self, s: f64) -> MatrixPair {
        self.scale(s)
    }
}

impl Neg for &MatrixPair {
    type Output = MatrixPair;
    fn neg(self) -> MatrixPair {
        self.scale(-1.0)
    }
}

impl fmt::Display for MatrixPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, v) in self.coords().enumerate() {
            if k > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

/// Entry (i, j) is `p_i·a_j`.
pub fn tensor_product(p: &[f64], a: &[f64]) -> Mat {
    let mut m = Mat::zeros(p.len(), a.len());
    for (i, pi) in p.iter().enumerate() {
        for (j, aj) in a.iter().enumerate() {
            m.set(i, j, pi * aj);
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub enum GeomError {
    ZeroDirection,
    NotInWaveCone { residual: f64 },
    ShapeMismatch,
    PeriodCap { periods: u64, cap: u64 },
    CoverFill { achieved: f64, required: f64 },
    EmptyTarget,
}

impl fmt::Display for GeomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeomError::ZeroDirection => write!(f, "direction vector has zero length"),
            GeomError::NotInWaveCone { residual } => {
                write!(f, "pair is not in the wave cone (residual {residual:e})")
            }
            GeomError::ShapeMismatch => write!(f, "inconsistent matrix dimensions"),
            GeomError::PeriodCap { periods, cap } => {
                write!(f, "slab computation needs {periods} periods, cap is {cap}")
            }
            GeomError::CoverFill { achieved, required } => {
                write!(f, "cover reached fill {achieved} below the required {required}")
            }
            GeomError::EmptyTarget => write!(f, "cover target is empty"),
        }
    }
}

/// γ = (p⊗a, B) with Ba = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveVector {
    pub p: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Mat,
}

impl WaveVector {
    pub fn new(p: Vec<f64>, a: Vec<f64>, b: Mat) -> Result<Self, GeomError> {
        if b.rows != p.len() || b.cols != a.len() {
            return Err(GeomError::ShapeMismatch);
        }
        let na = num::norm(&a);
        if !(na > 0.0) {
            return Err(GeomError::ZeroDirection);
        }
        let ba = num::norm(&b.apply(&a));
        if ba > 1e-12 * (b.norm() * na + 1.0) {
            return Err(GeomError::NotInWaveCone { residual: ba });
        }
        Ok(WaveVector { p, a, b })
    }

    pub fn m(&self) -> usize {
        self.p.len()
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn to_pair(&self) -> MatrixPair {
        MatrixPair::new(tensor_product(&self.p, &self.a), self.b.clone())
    }

    /// `s·γ`, keeping the direction `a`.
    pub fn scaled(&self, s: f64) -> WaveVector {
        WaveVector {
            p: self.p.iter().map(|v| v * s).collect(),
            a: self.a.clone(),
            b: self.b.scale(s),
        }
    }

    /// Factorizes a pair known to lie in the wave cone. The direction is
    /// normalized and snapped to a coordinate axis when it is one numerically.
    pub fn from_pair(g: &MatrixPair, tol: f64) -> Result<WaveVector, GeomError> {
        let (m, n) = (g.m(), g.n());
        let a = wave_direction(g).ok_or(GeomError::ZeroDirection)?;
        let p: Vec<f64> = (0..m).map(|i| (0..n).map(|j| g.first.get(i, j) * a[j]).sum()).collect();
        let rebuilt = tensor_product(&p, &a);
        let mut res = 0.0;
        for k in 0..m * n {
            let d = rebuilt.data[k] - g.first.data[k];
            res += d * d;
        }
        let ba = g.second.apply(&a);
        res = num::sqrt(res + num::dot(&ba, &ba));
        if res > tol * (1.0 + g.norm()) {
            return Err(GeomError::NotInWaveCone { residual: res });
        }
        Ok(WaveVector { p, a, b: g.second.clone() })
    }
}

/// Unit direction realizing the wave-cone residual of `g` (see [`wave_cone_residual`]).
fn wave_direction(g: &MatrixPair) -> Option<Vec<f64>> {
    let n = g.n();
    let sym = gram_difference(g);
    let mut a = min_eigvec(&sym, n);
    let na = num::norm(&a);
    if !(na > 0.0) {
        return None;
    }
    for v in a.iter_mut() {
        *v /= na;
    }
    // Sign convention: first nonzero component positive.
    if let Some(v) = a.iter().find(|v| num::abs(**v) > 1e-14) {
        if *v < 0.0 {
            for x in a.iter_mut() {
                *x = -*x;
            }
        }
    }
    let big = a.iter().fold(0.0f64, |acc, v| acc.max(num::abs(*v)));
    if big > 1.0 - 1e-12 {
        for v in a.iter_mut() {
            *v = if num::abs(*v) == big { v.signum() } else { 0.0 };
        }
    }
    Some(a)
}

/// `BᵀB − AᵀA` as an n×n row-major matrix.
fn gram_difference(g: &MatrixPair) -> Vec<f64> {
    let (m, n) = (g.m(), g.n());
    let mut s = alloc::vec![0.0; n * n];
    for j in 0..n {
        for k in 0..n {
            let mut v = 0.0;
            for i in 0..m {
                v += g.second.get(i, j) * g.second.get(i, k) - g.first.get(i, j) * g.first.get(i, k);
            }
            s[j * n + k] = v;
        }
    }
    s
}

/// Jacobi eigen-decomposition of a small symmetric matrix; returns (values, vectors by column).
pub fn sym_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = alloc::vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if num::abs(apq) < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sgn / (num::abs(theta) + num::sqrt(theta * theta + 1.0));
                let c = 1.0 / num::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

fn min_eigvec(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = sym_eigen(a, n);
    let mut best = 0;
    for k in 1..n {
        if vals[k] < vals[best] {
            best = k;
        }
    }
    (0..n).map(|i| vecs[i * n + best]).collect()
}

/// Distance-like residual of `g = (A, B)` from the wave cone:
/// `min_{|a|=1} (‖A − (Aa)⊗a‖² + ‖Ba‖²)^{1/2}`, which equals
/// `(tr AᵀA + λ_min(BᵀB − AᵀA))^{1/2}`.
pub fn wave_cone_residual(g: &MatrixPair) -> f64 {
    let n = g.n();
    let sym = gram_difference(g);
    let (vals, _) = sym_eigen(&sym, n);
    let lmin = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let tr: f64 = g.first.data.iter().map(|v| v * v).sum();
    num::sqrt((tr + lmin).max(0.0))
}

/// Axis-aligned open cube `center ± radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Cube {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        assert!(radius > 0.0, "cube radius must be positive");
        Cube { center, radius }
    }

    pub fn unit(n: usize) -> Self {
        Cube { center: alloc::vec![0.5; n], radius: 0.5 }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn side(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn volume(&self) -> f64 {
        num::powi(self.side(), self.dim() as i32)
    }

    pub fn lo(&self, i: usize) -> f64 {
        self.center[i] - self.radius
    }

    pub fn hi(&self, i: usize) -> f64 {
        self.center[i] + self.radius
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.center).all(|(xi, ci)| num::abs(xi - ci) < self.radius)
    }

    pub fn contains_cube(&self, o: &Cube) -> bool {
        (0..self.dim()).all(|i| o.lo(i) >= self.lo(i) && o.hi(i) <= self.hi(i))
    }

    pub fn diam(&self) -> f64 {
        self.side() * num::sqrt(self.dim() as f64)
    }

    /// Local coordinates in `(−1/2, 1/2)^n`.
    pub fn to_local(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).map(|(xi, ci)| (xi - ci) / self.side()).collect()
    }

    pub fn from_local(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.center).map(|(yi, ci)| ci + yi * self.side()).collect()
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> Vec<f64> {
        self.center.iter().map(|c| c + self.radius * (2.0 * rng::uniform(rng) - 1.0)).collect()
    }

    fn overlap(&self, o: &Cube) -> f64 {
        let mut v = 1.0;
        for i in 0..self.dim() {
            let w = self.hi(i).min(o.hi(i)) - self.lo(i).max(o.lo(i));
            if w <= 0.0 {
                return 0.0;
            }
            v *= w;
        }
        v
    }

    /// The 2^n dyadic children, in lexicographic order of the offsets.
    pub fn children(&self) -> Vec<Cube> {
        let n = self.dim();
        let r = self.radius / 2.0;
        (0..1usize << n)
            .map(|mask| Cube {
                center: (0..n)
                    .map(|i| self.center[i] + if mask >> i & 1 == 1 { r } else { -r })
                    .collect(),
                radius: r,
            })
            .collect()
    }
}

/// Finite union of boxes with disjoint interiors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub boxes: Vec<Cube>,
}

impl Domain {
    pub fn new(boxes: Vec<Cube>) -> Result<Self, GeomError> {
        let total: f64 = boxes.iter().map(Cube::volume).sum();
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if boxes[i].overlap(&boxes[j]) > 1e-12 * total {
                    return Err(GeomError::ShapeMismatch);
                }
            }
        }
        Ok(Domain { boxes })
    }

    pub fn unit(n: usize) -> Self {
        Domain { boxes: alloc::vec![Cube::unit(n)] }
    }

    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(Cube::volume).sum()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.contains(x))
    }

    pub fn dim(&self) -> usize {
        self.boxes.first().map_or(0, Cube::dim)
    }

    pub fn diam(&self) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for i in 0..n {
            let lo = self.boxes.iter().map(|b| b.lo(i)).fold(f64::INFINITY, f64::min);
            let hi = self.boxes.iter().map(|b| b.hi(i)).fold(f64::NEG_INFINITY, f64::max);
            s += (hi - lo) * (hi - lo);
        }
        num::sqrt(s)
    }

    /// Uniform sample over the union.
    pub fn sample(&self, rng: &mut rng::Rng) -> Vec<f64> {
        let total = self.volume();
        let mut u = rng::uniform(rng) * total;
        for b in &self.boxes {
            if u < b.volume() {
                return b.sample(rng);
            }
            u -= b.volume();
        }
        self.boxes.last().expect("nonempty domain").sample(rng)
    }
}

/// Closed segment [α, β].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub alpha: MatrixPair,
    pub beta: MatrixPair,
}

/// Euclidean distance from `x` to the closed segment.
pub fn segment_distance(x: &MatrixPair, s: &Segment) -> f64 {
    let d = &s.beta - &s.alpha;
    let w = x - &s.alpha;
    let dd = d.dot(&d);
    let t = if dd > 0.0 { (w.dot(&d) / dd).clamp(0.0, 1.0) } else { 0.0 };
    x.dist(&s.alpha.axpy(t, &d))
}

/// Exact volume of `b ∩ {a·x ≤ c}`.
pub fn halfspace_box_volume(b: &Cube, a: &[f64], c: f64) -> f64 {
    let side = b.side();
    let na = num::norm(a);
    assert!(na > 0.0, "halfspace normal must be nonzero");
    // Shift to the lower corner and flip negative components: s ∈ [0, side]^k, w·s ≤ cc.
    let mut cc = c;
    let mut w: Vec<f64> = Vec::new();
    let mut free = 0;
    for i in 0..b.dim() {
        cc -= a[i] * b.lo(i);
        if num::abs(a[i]) <= 1e-13 * na {
            free += 1;
            continue;
        }
        if a[i] < 0.0 {
            cc -= a[i] * side;
        }
        w.push(num::abs(a[i]));
    }
    let full = num::powi(side, b.dim() as i32);
    if cc <= 0.0 {
        return 0.0;
    }
    let top: f64 = w.iter().sum::<f64>() * side;
    if cc >= top {
        return full;
    }
    let k = w.len();
    let mut acc = 0.0;
    for mask in 0..1usize << k {
        let mut shift = 0.0;
        let mut sign = 1.0;
        for (i, wi) in w.iter().enumerate() {
            if mask >> i & 1 == 1 {
                shift += wi * side;
                sign = -sign;
            }
        }
        let z = cc - shift;
        if z > 0.0 {
            acc += sign * num::powi(z, k as i32);
        }
    }
    let mut denom = 1.0;
    for (i, wi) in w.iter().enumerate() {
        denom *= wi * (i + 1) as f64;
    }
    let part = (acc / denom).clamp(0.0, num::powi(side, k as i32));
    part * num::powi(side, free)
}

/// Default cap on the number of periods summed by [`periodic_slab_volume`].
pub const SLAB_PERIOD_CAP: u64 = 1 << 26;

/// Exact volume of `{x ∈ b : frac(a·x/δ) ∈ ∪ intervals}`.
pub fn periodic_slab_volume(
    b: &Cube,
    a: &[f64],
    delta: f64,
    intervals: &[(f64, f64)],
    cap: u64,
) -> Result<f64, GeomError> {
    let na = num::norm(a);
    if !(na > 0.0) {
        return Err(GeomError::ZeroDirection);
    }
    if intervals.is_empty() {
        return Ok(0.0);
    }
    let (mut tmin, mut tmax) = (0.0, 0.0);
    for i in 0..b.dim() {
        let (u, v) = (a[i] * b.lo(i) / delta, a[i] * b.hi(i) / delta);
        tmin += u.min(v);
        tmax += u.max(v);
    }
    let j0 = num::floor(tmin);
    let j1 = num::floor(tmax);
    let periods = (j1 - j0) as u64 + 1;
    if periods > cap {
        return Err(GeomError::PeriodCap { periods, cap });
    }
    let axis: Vec<usize> = (0..b.dim()).filter(|i| num::abs(a[*i]) > 1e-13 * na).collect();
    if axis.len() == 1 {
        // Along a single axis the halfspace volume is linear, so the sum collapses.
        let k = axis[0];
        let total_len: f64 = intervals.iter().map(|(s, e)| e - s).sum();
        let cum = |t: f64| {
            let f = num::frac(t);
            let mut part = 0.0;
            for (s, e) in intervals {
                part += (e.min(f) - s).max(0.0);
            }
            num::floor(t) * total_len + part
        };
        let cross = b.volume() / b.side();
        return Ok(((cum(tmax) - cum(tmin)) * delta / num::abs(a[k])) * cross);
    }
    let h = |c: f64| halfspace_box_volume(b, a, c);
    let mut v = 0.0;
    let mut j = j0;
    while j <= j1 {
        for (s, e) in intervals {
            v += h(delta * (j + e)) - h(delta * (j + s));
        }
        j += 1.0;
    }
    Ok(v.clamp(0.0, b.volume()))
}

/// Monte-Carlo volume of `{indicator}` in `b`, with the 99% normal half-width.
pub fn mc_measure(indicator: &dyn Fn(&[f64]) -> bool, b: &Cube, samples: usize, seed: u64) -> (f64, f64) {
    assert!(samples >= 100, "mc_measure needs at least 100 samples");
    let mut r = rng::stream(seed, 0x6d63);
    let mut hits = 0usize;
    for _ in 0..samples {
        let x = b.sample(&mut r);
        if indicator(&x) {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    let hw = 2.5758 * num::sqrt(p * (1.0 - p) / samples as f64);
    (p * b.volume(), hw * b.volume())
}

/// Default bound on dyadic subdivision depth.
pub const COVER_DEPTH: u32 = 40;

/// Dyadic cover of `target` by cubes of radius < `max_radius`.
///
/// Each target box is halved until its pieces are small enough, so the
/// tiling is exact whenever the depth allows it.
pub fn vitali_cover(target: &Domain, max_radius: f64, fill: f64, max_depth: u32) -> Result<Vec<Cube>, GeomError> {
    if target.boxes.is_empty() {
        return Err(GeomError::EmptyTarget);
    }
    let mut out = Vec::new();
    let mut covered = 0.0;
    for b in &target.boxes {
        let mut depth = 0u32;
        let mut r = b.radius;
        while r >= max_radius && depth < max_depth {
            r /= 2.0;
            depth += 1;
        }
        if r >= max_radius {
            continue;
        }
        let k = 1u64 << depth;
        let n = b.dim();
        let count = k.checked_pow(n as u32).unwrap_or(u64::MAX);
        if count > (1 << 24) {
            return Err(GeomError::CoverFill { achieved: covered / target.volume(), required: fill });
        }
        for idx in 0..count {
            let mut rem = idx;
            let mut c = alloc::vec![0.0; n];
            for i in (0..n).rev() {
                let ji = rem % k;
                rem /= k;
                c[i] = b.lo(i) + r * (2 * ji + 1) as f64;
            }
            out.push(Cube { center: c, radius: r });
            covered += num::powi(2.0 * r, n as i32);
        }
    }
    let achieved = covered / target.volume();
    if achieved < fill {
        return Err(GeomError::CoverFill { achieved, required: fill });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn tensor_examples() {
        assert_eq!(tensor_product(&[1.0, 0.0], &[0.0, 1.0]).data.as_slice(), &[0.0, 1.0, 0.0, 0.0]);
        assert!(tensor_product(&[0.0, 0.0], &[3.0, 4.0]).data.iter().all(|v| *v == 0.0));
        assert_eq!(tensor_product(&[2.0, 3.0], &[1.0, -1.0]).data.as_slice(), &[2.0, -2.0, 3.0, -3.0]);
    }

    #[test]
    fn segment_examples() {
        let a = MatrixPair::zeros(1, 2);
        let b = MatrixPair::from_slice(1, 2, &[2.0, 0.0, 0.0, 0.0]);
        let s = Segment { alpha: a.clone(), beta: b.clone() };
        assert_eq!(segment_distance(&a, &s), 0.0);
        assert_eq!(segment_distance(&a.lerp(0.5, &b), &s), 0.0);
        let x = MatrixPair::from_slice(1, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert!((segment_distance(&x, &s) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn halfspace_examples() {
        let b = Cube::unit(2);
        assert_eq!(halfspace_box_volume(&b, &[1.0, 0.0], -1.0), 0.0);
        assert_eq!(halfspace_box_volume(&b, &[1.0, 0.0], 2.0), 1.0);
        assert!((halfspace_box_volume(&b, &[1.0, 0.0], 0.5) - 0.5).abs() < 1e-15);
        // Triangle: x + y ≤ 0.5 on the unit square has area 1/8.
        assert!((halfspace_box_volume(&b, &[1.0, 1.0], 0.5) - 0.125).abs() < 1e-15);
        assert!((halfspace_box_volume(&b, &[-1.0, 1.0], 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn slab_examples() {
        let b = Cube::unit(2);
        let v = periodic_slab_volume(&b, &[1.0, 0.0], 0.25, &[(0.0, 0.5)], SLAB_PERIOD_CAP).unwrap();
        assert!((v - 0.5).abs() < 1e-14);
        let full = periodic_slab_volume(&b, &[0.3, 0.7], 0.05, &[(0.0, 1.0)], SLAB_PERIOD_CAP).unwrap();
        assert!((full - 1.0).abs() < 1e-10);
        assert_eq!(periodic_slab_volume(&b, &[0.3, 0.7], 0.05, &[], SLAB_PERIOD_CAP).unwrap(), 0.0);
        assert!(matches!(
            periodic_slab_volume(&b, &[1.0, 1.0], 1e-6, &[(0.0, 0.5)], 1000),
            Err(GeomError::PeriodCap { .. })
        ));
    }

    #[test]
    fn mc_examples() {
        let b = Cube::unit(2);
        let (v, hw) = mc_measure(&|_| true, &b, 1000, 1);
        assert_eq!((v, hw), (1.0, 0.0));
        assert_eq!(mc_measure(&|_| false, &b, 1000, 1), (0.0, 0.0));
        let (v, hw) = mc_measure(&|x| x[0] + x[1] <= 1.0, &b, 20000, 3);
        assert!((v - halfspace_box_volume(&b, &[1.0, 1.0], 1.0)).abs() <= hw);
    }

    #[test]
    fn vitali_examples() {
        let b = Cube::unit(2);
        let one = vitali_cover(&Domain::unit(2), 0.6, 0.99, COVER_DEPTH).unwrap();
        assert_eq!(one, vec![b.clone()]);
        let cov = vitali_cover(&Domain::unit(2), 0.3, 0.9, COVER_DEPTH).unwrap();
        assert_eq!(cov.len(), 4);
        assert!(cov.iter().all(|c| c.radius == 0.25 && b.contains_cube(c)));
        match vitali_cover(&Domain::unit(2), 0.01, 0.999, 2) {
            Err(GeomError::CoverFill { achieved, .. }) => assert_eq!(achieved, 0.0),
            other => panic!("expected fill failure, got {other:?}"),
        }
    }

    #[test]
    fn wave_cone_residual_small_cases() {
        let g = WaveVector::new(vec![1.0], vec![1.0, 0.0], Mat::from_rows(1, 2, &[0.0, 1.0])).unwrap();
        assert!(wave_cone_residual(&g.to_pair()) < 1e-12);
        // (I, 0) in 2×2 has rank two: not in the cone.
        let p = MatrixPair::new(Mat::from_rows(2, 2, &[1.0, 0.0, 0.0, 1.0]), Mat::zeros(2, 2));
        assert!(wave_cone_residual(&p) > 0.5);
        let s = MatrixPair::scalar(3.0, 0.0);
        assert_eq!(wave_cone_residual(&s), 0.0);
        assert!((wave_cone_residual(&MatrixPair::scalar(0.0, 2.0)) - 2.0).abs() < 1e-12);
        let back = WaveVector::from_pair(&g.scaled(2.0).to_pair(), 1e-10).unwrap();
        assert_eq!(back.a, vec![1.0, 0.0]);
    }
}
