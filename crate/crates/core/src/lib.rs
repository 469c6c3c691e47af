//! Score-variance uncertainty for diffusion samplers.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod mlp;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod uncertainty;

pub use error::{Error, Result};
