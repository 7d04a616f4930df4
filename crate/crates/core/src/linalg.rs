//! Small dense solvers: Gaussian elimination and damped least squares.

use alloc::vec::Vec;

use crate::geometry::sym_eigen;
use crate::num;

/// Solves `A x = b` in place (row-major `n×n`); `None` when singular.
pub fn solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m: Vec<f64> = a.to_vec();
    let mut x: Vec<f64> = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if num::abs(m[r * n + col]) > num::abs(m[piv * n + col]) {
                piv = r;
            }
        }
        if !(num::abs(m[piv * n + col]) > 1e-300) {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
            x.swap(col, piv);
        }
        let d = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            if f != 0.0 {
                for c in col..n {
                    m[r * n + c] -= f * m[col * n + c];
                }
                x[r] -= f * x[col];
            }
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for c in col + 1..n {
            s -= m[col * n + c] * x[c];
        }
        x[col] = s / m[col * n + col];
    }
    Some(x)
}

/// Forward-difference Jacobian, rows = residual components.
pub fn jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], fx: &[f64]) -> Vec<f64> {
    let (n, m) = (x.len(), fx.len());
    let mut j = alloc::vec![0.0; m * n];
    let mut xp = x.to_vec();
    for k in 0..n {
        let h = 1e-7 * (1.0 + num::abs(x[k]));
        xp[k] = x[k] + h;
        let fp = f(&xp);
        xp[k] = x[k];
        for r in 0..m {
            j[r * n + k] = (fp[r] - fx[r]) / h;
        }
    }
    j
}

/// Central-difference Jacobian.
pub fn jacobian_central(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> (Vec<f64>, usize) {
    let n = x.len();
    let mut xp = x.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        xp[k] = x[k] + h;
        let fp = f(&xp);
        xp[k] = x[k] - h;
        let fm = f(&xp);
        xp[k] = x[k];
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect());
    }
    let m = cols.first().map_or(0, Vec::len);
    let mut j = alloc::vec![0.0; m * n];
    for (k, c) in cols.iter().enumerate() {
        for r in 0..m {
            j[r * n + k] = c[r];
        }
    }
    (j, m)
}

/// Singular values of an `m×n` matrix, ascending (via the eigenvalues of JᵀJ).
pub fn singular_values(j: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut g = alloc::vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            g[a * n + b] = (0..m).map(|r| j[r * n + a] * j[r * n + b]).sum();
        }
    }
    let (vals, _) = sym_eigen(&g, n);
    let mut s: Vec<f64> = vals.iter().map(|v| num::sqrt(v.max(0.0))).collect();
    s.sort_by(f64::total_cmp);
    s
}

pub struct LmOutcome {
    pub x: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Iterations with less than this relative decrease before a run counts as
/// stalled at a nonzero minimum.
const STALL_RATE: f64 = 1e-2;
const STALL_ITERS: usize = 4;

/// Levenberg–Marquardt on `min ‖f(x)‖²`, stopping once `‖f‖ < tol` or after
/// [`STALL_ITERS`] consecutive iterations that shrink `‖f‖` by less than
/// [`STALL_RATE`].
pub fn levenberg_marquardt(f: &dyn Fn(&[f64]) -> Vec<f64>, x0: &[f64], tol: f64, max_iter: usize) -> LmOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut cost = num::norm(&fx);
    let mut mu = 1e-3;
    let mut it = 0;
    let mut stalled = 0;
    while it < max_iter && cost >= tol && cost.is_finite() {
        it += 1;
        let j = jacobian(f, &x, &fx);
        let m = fx.len();
        let mut g = alloc::vec![0.0; n * n];
        let mut rhs = alloc::vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                g[a * n + b] = (0..m).map(|r| j[r * n + a] * j[r * n + b]).sum();
            }
            rhs[a] = -(0..m).map(|r| j[r * n + a] * fx[r]).sum::<f64>();
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut gd = g.clone();
            for a in 0..n {
                gd[a * n + a] += mu * (g[a * n + a] + 1e-12);
            }
            let Some(step) = solve(&gd, &rhs, n) else {
                mu *= 10.0;
                continue;
            };
            let xn: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
            let fnew = f(&xn);
            let cn = num::norm(&fnew);
            if cn.is_finite() && cn < cost {
                stalled = if cn > (1.0 - STALL_RATE) * cost { stalled + 1 } else { 0 };
                x = xn;
                fx = fnew;
                cost = cn;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                break;
            }
            mu *= 4.0;
        }
        if !improved || stalled >= STALL_ITERS {
            break;
        }
    }
    LmOutcome { x, residual: cost, iterations: it }
}
