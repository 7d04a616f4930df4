//! Configuration, fixtures, exports and subcommands of the `wildgrad` binary.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod export;
pub mod fixtures;
