//! Reverse-mode automatic differentiation over dense row-major f64 arrays.
//!
//! A [`Tape`] records every op whose inputs include a tracked tensor; ops on
//! plain tensors just compute values. 64-bit throughout: training here is
//! desk-scale and reproducibility beats speed.

pub mod check;
mod ops;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape};
pub use tensor::Tensor;
