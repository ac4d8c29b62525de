//! Crate-wide error type.
//!
//! The CLI maps these onto exit codes, so variants are grouped by what the
//! caller can do about them: bad configuration or arguments, a broken runtime
//! invariant, or an I/O problem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor operands or state vectors with incompatible dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter outside its documented domain (alpha <= 1, even pooling
    /// kernel, zero bucket size, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Bad engine or model configuration.
    #[error("config: {0}")]
    Config(String),

    /// Attempted KV write to a position that has already been committed.
    #[error("cache write to committed slot: layer {layer}, block position {position}")]
    CommittedWrite { layer: usize, position: usize },

    /// Selection was asked for a block with nothing left to process.
    #[error("block already complete: no masked or uncommitted decoded positions")]
    BlockComplete,

    /// A scripted trace ran out of steps.
    #[error("oracle trace exhausted: step {step} requested but only {len} scripted")]
    TraceExhausted { step: usize, len: usize },

    /// A runtime invariant the engine checks on every step was violated.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
