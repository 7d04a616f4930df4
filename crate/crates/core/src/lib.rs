#![cfg_attr(not(any(feature = "std", test)), no_std)]
//! Convex-integration engine for Lipschitz solutions of `div σ(Du) = 0`
//! whose gradients oscillate everywhere.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::result_large_err, clippy::needless_range_loop)]

extern crate alloc;

pub mod blocks;
pub mod driver;
pub mod field;
pub mod geometry;
pub mod linalg;
pub mod num;
pub mod rng;
pub mod scenario;
pub mod stage;
pub mod staircase;
pub mod tnconfig;
