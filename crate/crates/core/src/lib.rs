//! Progressive adversarial diffusion distillation on low-dimensional toy data.

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod nets;

pub use error::{Error, Result};
