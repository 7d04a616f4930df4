//! Deterministic per-task random streams.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, task)`; distinct tasks give independent streams.
pub fn stream(seed: u64, task: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(task)))
}

/// Derives a child task id, so nested work stays reproducible.
pub fn subtask(task: u64, k: u64) -> u64 {
    splitmix(task.wrapping_mul(31).wrapping_add(k))
}

/// Uniform in `[0, 1)` with 53 random bits.
#[inline]
pub fn uniform(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
pub fn range(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    (uniform(rng) * n as f64) as usize % n.max(1)
}

/// Standard normal by Box-Muller.
pub fn normal(rng: &mut Rng) -> f64 {
    let u = 1.0 - uniform(rng);
    let v = uniform(rng);
    crate::num::sqrt(-2.0 * crate::num::ln(u)) * crate::num::cos(core::f64::consts::TAU * v)
}

/// Uniform point of the open Euclidean ball of radius `r` in dimension `d`.
pub fn in_ball(rng: &mut Rng, d: usize, r: f64) -> alloc::vec::Vec<f64> {
    let mut v: alloc::vec::Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let n = crate::num::norm(&v).max(1e-300);
    let rad = r * crate::num::pow(uniform(rng), 1.0 / d as f64);
    for x in v.iter_mut() {
        *x *= rad / n;
    }
    v
}

/// Uniform point of the sphere of radius `r`.
pub fn on_sphere(rng: &mut Rng, d: usize, r: f64) -> alloc::vec::Vec<f64> {
    let mut v: alloc::vec::Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let n = crate::num::norm(&v).max(1e-300);
    for x in v.iter_mut() {
        *x *= r / n;
    }
    v
}
