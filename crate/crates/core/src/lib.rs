//! Bayesian multilevel hidden Markov models with multivariate Gaussian
//! emissions, and a reproducible Monte Carlo simulation-study harness.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod io;
pub mod matrix;
pub mod model;
pub mod ppc;
pub mod rng;
pub mod sampler;
pub mod simulate;
pub mod study;

pub use error::{Error, Result};
pub use matrix::Matrix;
