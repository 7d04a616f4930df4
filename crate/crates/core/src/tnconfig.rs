//! T_N-configurations: construction, cyclic barycentric coefficients, segment sets.
//!
//! Public indices are 1-based and taken modulo N.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{segment_distance, GeomError, Mat, MatrixPair, Segment, WaveVector};

#[derive(Clone, Debug, PartialEq)]
pub enum TnError {
    TooFewPoints(usize),
    /// `t_k` outside `(0, 1)`; 1-based index.
    Coefficient { index: usize, value: f64 },
    /// `κ_i ≤ 1`; 1-based index.
    Kappa { index: usize, value: f64 },
    /// The supplied last γ disagrees with minus the sum of the others.
    GammaSum { index: usize, mismatch: f64 },
    Shape { index: usize },
    Wave { index: usize, err: GeomError },
}

impl fmt::Display for TnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TnError::TooFewPoints(n) => write!(f, "a T_N configuration needs N >= 2, got {n}"),
            TnError::Coefficient { index, value } => write!(f, "t_{index} = {value} is outside (0,1)"),
            TnError::Kappa { index, value } => write!(f, "kappa_{index} = {value} must exceed 1"),
            TnError::GammaSum { index, mismatch } => {
                write!(f, "gamma_{index} differs from minus the sum of the others by {mismatch:e}")
            }
            TnError::Shape { index } => write!(f, "gamma_{index} has inconsistent dimensions"),
            TnError::Wave { index, err } => write!(f, "gamma_{index}: {err}"),
        }
    }
}

/// Zero-based storage index of the 1-based cyclic index `i`.
#[inline]
pub fn slot(i: isize, n: usize) -> usize {
    (i - 1).rem_euclid(n as isize) as usize
}

/// `nu[i][j] = ν_{i+1}^{j+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffMatrix {
    pub nu: Vec<Vec<f64>>,
}

impl CoeffMatrix {
    /// `ν_i^j` with 1-based cyclic indices.
    pub fn get(&self, i: isize, j: isize) -> f64 {
        let n = self.nu.len();
        self.nu[slot(i, n)][slot(j, n)]
    }

    pub fn row(&self, i: isize) -> &[f64] {
        &self.nu[slot(i, self.nu.len())]
    }
}

/// Coefficients with `P_i = Σ_j ν_i^j X_j` for the cyclic recursion
/// `P_{k+1} = t_k X_k + (1 − t_k) P_k`.
pub fn cyclic_coeffs(t: &[f64]) -> Result<CoeffMatrix, TnError> {
    let n = t.len();
    if n < 2 {
        return Err(TnError::TooFewPoints(n));
    }
    for (k, tk) in t.iter().enumerate() {
        if !(*tk > 0.0 && *tk < 1.0) {
            return Err(TnError::Coefficient { index: k + 1, value: *tk });
        }
    }
    let tau: f64 = t.iter().map(|x| 1.0 - x).product();
    let denom = 1.0 - tau;
    let mut nu = alloc::vec![alloc::vec![0.0; n]; n];
    for i in 1..=n as isize {
        let mut prod = 1.0;
        for s in 1..=n as isize {
            let j = slot(i - s, n);
            nu[slot(i, n)][j] = prod * t[j] / denom;
            prod *= 1.0 - t[j];
        }
    }
    Ok(CoeffMatrix { nu })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TNConfig {
    pub rho: MatrixPair,
    pub gammas: Vec<WaveVector>,
    pub kappas: Vec<f64>,
    pub pis: Vec<MatrixPair>,
    pub xis: Vec<MatrixPair>,
    pub chis: Vec<f64>,
}

/// Builds and validates a configuration, recomputing the last γ as minus the
/// sum of the others (it must agree with the supplied one within 1e−9).
pub fn build_tn(rho: MatrixPair, gammas: Vec<WaveVector>, kappas: Vec<f64>) -> Result<TNConfig, TnError> {
    let n = gammas.len();
    if n < 2 {
        return Err(TnError::TooFewPoints(n));
    }
    if kappas.len() != n {
        return Err(TnError::Shape { index: kappas.len().min(n) + 1 });
    }
    for (k, g) in gammas.iter().enumerate() {
        if g.m() != rho.m() || g.n() != rho.n() {
            return Err(TnError::Shape { index: k + 1 });
        }
        WaveVector::new(g.p.clone(), g.a.clone(), g.b.clone())
            .map_err(|err| TnError::Wave { index: k + 1, err })?;
    }
    for (k, kappa) in kappas.iter().enumerate() {
        if !(*kappa > 1.0) {
            return Err(TnError::Kappa { index: k + 1, value: *kappa });
        }
    }
    let mut sum = MatrixPair::zeros(rho.m(), rho.n());
    for g in &gammas[..n - 1] {
        sum = &sum + &g.to_pair();
    }
    let want = -&sum;
    let last = &gammas[n - 1];
    let mismatch = want.dist(&last.to_pair());
    if mismatch > 1e-9 {
        return Err(TnError::GammaSum { index: n, mismatch });
    }
    // Keep the supplied direction; refit p and B to the exact closing pair.
    let a2: f64 = last.a.iter().map(|v| v * v).sum();
    let p: Vec<f64> = (0..rho.m())
        .map(|i| (0..rho.n()).map(|j| want.first.get(i, j) * last.a[j]).sum::<f64>() / a2)
        .collect();
    let closing = WaveVector { p, a: last.a.clone(), b: want.second.clone() };
    let mut gammas = gammas;
    gammas[n - 1] = closing;

    let mut pis = Vec::with_capacity(n);
    let mut xis = Vec::with_capacity(n);
    let mut pi = rho.clone();
    for (g, kappa) in gammas.iter().zip(&kappas) {
        let gp = g.to_pair();
        xis.push(pi.axpy(*kappa, &gp));
        pis.push(pi.clone());
        pi = &pi + &gp;
    }
    let chis = kappas.iter().map(|k| 1.0 / k).collect();
    Ok(TNConfig { rho, gammas, kappas, pis, xis, chis })
}

impl TNConfig {
    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }

    pub fn pi(&self, i: isize) -> &MatrixPair {
        &self.pis[slot(i, self.len())]
    }

    pub fn xi(&self, i: isize) -> &MatrixPair {
        &self.xis[slot(i, self.len())]
    }

    pub fn chi(&self, i: isize) -> f64 {
        self.chis[slot(i, self.len())]
    }

    pub fn kappa(&self, i: isize) -> f64 {
        self.kappas[slot(i, self.len())]
    }

    pub fn gamma(&self, i: isize) -> &WaveVector {
        &self.gammas[slot(i, self.len())]
    }

    /// τ = Π(1 − χ_k).
    pub fn tau(&self) -> f64 {
        self.chis.iter().map(|c| 1.0 - c).product()
    }

    /// The segments `[ξ_j, π_j]` making up 𝒯.
    pub fn segments(&self) -> Vec<Segment> {
        self.xis
            .iter()
            .zip(&self.pis)
            .map(|(x, p)| Segment { alpha: x.clone(), beta: p.clone() })
            .collect()
    }

    /// `Σγ_i` as a pair; zero up to rounding.
    pub fn gamma_sum(&self) -> MatrixPair {
        let mut s = MatrixPair::zeros(self.rho.m(), self.rho.n());
        for g in &self.gammas {
            s = &s + &g.to_pair();
        }
        s
    }
}

/// Distance from `x` to 𝒯 = ∪_j [ξ_j, π_j].
pub fn tn_distance(cfg: &TNConfig, x: &MatrixPair) -> f64 {
    cfg.segments().iter().map(|s| segment_distance(x, s)).fold(f64::INFINITY, f64::min)
}

/// Weights ν with `λξ_i + (1 − λ)π_i = Σ_j ν_j ξ_j`; entry `j−1` holds ν_j.
pub fn corner_weights(cfg: &TNConfig, i: isize, lambda: f64) -> Vec<f64> {
    let n = cfg.len();
    let c = cyclic_coeffs(&cfg.chis).expect("chi values of a valid configuration lie in (0,1)");
    let row = c.row(i);
    let mut w: Vec<f64> = row.iter().map(|v| (1.0 - lambda) * v).collect();
    w[slot(i, n)] += lambda;
    w
}

/// The `m = 1, n = 2` T_4 configuration at ρ = 0: γ's along `±e₁, ±e₂`
/// with divergence-free second components, κ = 2.
pub fn t4_fixture() -> TNConfig {
    let wv = |p: f64, a: [f64; 2], b: [f64; 2]| WaveVector { p: alloc::vec![p], a: a.to_vec(), b: Mat::from_rows(1, 2, &b) };
    let g1 = wv(1.0, [1.0, 0.0], [0.0, 1.0]);
    let g2 = wv(1.0, [0.0, 1.0], [-1.0, 0.0]);
    let (g3, g4) = (g1.scaled(-1.0), g2.scaled(-1.0));
    build_tn(MatrixPair::zeros(1, 2), alloc::vec![g1, g2, g3, g4], alloc::vec![2.0; 4])
        .expect("the T_4 fixture is a valid configuration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat;
    use alloc::vec;
    use proptest::prelude::*;

    fn wv(p: &[f64], a: &[f64], b: &[f64]) -> WaveVector {
        WaveVector::new(p.to_vec(), a.to_vec(), Mat::from_rows(p.len(), a.len(), b)).unwrap()
    }

    fn t4() -> TNConfig {
        t4_fixture()
    }

    /// Independent oracle: solve the cyclic system for a scalar corner basis.
    fn linear_solve_coeffs(t: &[f64]) -> Vec<Vec<f64>> {
        let n = t.len();
        let mut out = vec![vec![0.0; n]; n];
        for j in 0..n {
            // Unknowns P_0..P_{n-1}: P_{k+1} − (1−t_k)P_k = t_k δ_{kj}.
            let mut a = vec![vec![0.0; n + 1]; n];
            for k in 0..n {
                let next = (k + 1) % n;
                a[k][next] += 1.0;
                a[k][k] -= 1.0 - t[k];
                a[k][n] = if k == j { t[k] } else { 0.0 };
            }
            for col in 0..n {
                let piv = (col..n).max_by(|x, y| a[*x][col].abs().total_cmp(&a[*y][col].abs())).unwrap();
                a.swap(col, piv);
                for r in 0..n {
                    if r != col {
                        let f = a[r][col] / a[col][col];
                        for c in col..=n {
                            a[r][c] -= f * a[col][c];
                        }
                    }
                }
            }
            for i in 0..n {
                out[i][j] = a[i][n] / a[i][i];
            }
        }
        out
    }

    #[test]
    fn two_by_two_example() {
        let c = cyclic_coeffs(&[0.5, 0.5]).unwrap();
        for (i, row) in [[1.0 / 3.0, 2.0 / 3.0], [2.0 / 3.0, 1.0 / 3.0]].iter().enumerate() {
            for j in 0..2 {
                assert!((c.nu[i][j] - row[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn three_point_example() {
        let c = cyclic_coeffs(&[0.4, 0.5, 0.6]).unwrap();
        let want = [0.090_909_090_909_090_9, 0.227_272_727_272_727_3, 0.681_818_181_818_181_8];
        for j in 0..3 {
            assert!((c.get(1, j as isize + 1) - want[j]).abs() < 1e-12);
        }
        assert!(matches!(cyclic_coeffs(&[0.4, 1.0]), Err(TnError::Coefficient { index: 2, .. })));
    }

    #[test]
    fn build_examples() {
        let g1 = wv(&[1.0], &[1.0], &[0.0]);
        let cfg = build_tn(MatrixPair::zeros(1, 1), vec![g1.clone(), g1.scaled(-1.0)], vec![2.0, 2.0]).unwrap();
        assert_eq!(cfg.xi(1), &MatrixPair::scalar(2.0, 0.0));
        assert_eq!(cfg.pi(2), &MatrixPair::scalar(1.0, 0.0));
        assert_eq!(cfg.xi(2), &MatrixPair::scalar(-1.0, 0.0));
        let t = t4();
        assert_eq!(t.len(), 4);
        assert!(t.gamma_sum().norm() <= 1e-12);
        assert!(t.gammas.iter().any(|g| g.b.norm() > 0.0));
        for g in &t.gammas {
            assert!(crate::num::norm(&g.b.apply(&g.a)) < 1e-15);
        }
        let err = build_tn(MatrixPair::zeros(1, 1), vec![g1.clone(), g1.scaled(-1.0)], vec![1.0, 2.0]);
        assert_eq!(err, Err(TnError::Kappa { index: 1, value: 1.0 }));
        let err = build_tn(MatrixPair::zeros(1, 1), vec![g1.clone(), g1.scaled(-0.5)], vec![2.0, 2.0]);
        assert!(matches!(err, Err(TnError::GammaSum { index: 2, .. })));
    }

    #[test]
    fn distance_examples() {
        let t = t4();
        assert_eq!(tn_distance(&t, t.xi(2)), 0.0);
        assert_eq!(tn_distance(&t, t.pi(3)), 0.0);
        let g1 = wv(&[1.0], &[1.0, 0.0], &[0.0, 0.0]);
        let sym = build_tn(MatrixPair::zeros(1, 2), vec![g1.clone(), g1.scaled(-1.0)], vec![2.0, 2.0]).unwrap();
        let x = MatrixPair::from_slice(1, 2, &[0.0, 0.0, 0.0, 0.25]);
        assert!((tn_distance(&sym, &x) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn corner_weight_examples() {
        let g1 = wv(&[1.0], &[1.0], &[0.0]);
        let cfg = build_tn(MatrixPair::zeros(1, 1), vec![g1.clone(), g1.scaled(-1.0)], vec![2.0, 2.0]).unwrap();
        let w = corner_weights(&cfg, 1, 0.5);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(corner_weights(&cfg, 2, 1.0), vec![0.0, 1.0]);
        let c = cyclic_coeffs(&cfg.chis).unwrap();
        assert_eq!(corner_weights(&cfg, 1, 0.0), c.nu[0]);
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(t in proptest::collection::vec(0.001f64..0.999, 2..=6)) {
            let c = cyclic_coeffs(&t).unwrap();
            for row in &c.nu {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
            }
        }

        #[test]
        fn matches_linear_solve(t in proptest::collection::vec(0.05f64..0.95, 2..=6)) {
            let c = cyclic_coeffs(&t).unwrap();
            let o = linear_solve_coeffs(&t);
            for i in 0..t.len() {
                for j in 0..t.len() {
                    prop_assert!((c.nu[i][j] - o[i][j]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn weights_reproduce_point(lambda in 0.0f64..=1.0, i in 1isize..=4) {
            let t = t4();
            let w = corner_weights(&t, i, lambda);
            let mut acc = MatrixPair::zeros(1, 2);
            for (j, x) in t.xis.iter().enumerate() {
                acc = acc.axpy(w[j], x);
            }
            let eta = t.xi(i).lerp(lambda, t.pi(i));
            prop_assert!(acc.dist(&eta) < 1e-10);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
