//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument to an operation (degenerate stride, p out of range, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Operand shapes do not conform for the named operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tracked operation produced a non-finite value.
    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    /// Numerical blow-up inside the integrator; `step` is the fine-step index.
    #[error("integration diverged at step {step}")]
    Integration { step: usize },

    /// Training produced a non-finite loss or gradient. The epoch history up
    /// to the failure is attached so callers can inspect the run.
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        history: crate::train::TrainHistory,
    },

    /// A checkpoint is inconsistent with the configuration it is used under.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    /// A checkpoint file failed structural validation.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// Run-config schema violation; the message names the offending key.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
