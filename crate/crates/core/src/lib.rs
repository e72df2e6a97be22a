//! Core library: Lorenz data generation, reverse-mode autodiff, the
//! BiLSTM/Transformer model family, training, and evaluation.

// Validators use `!(x > 0.0)` so NaN is rejected along with the out-of-range case.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dynsys;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
