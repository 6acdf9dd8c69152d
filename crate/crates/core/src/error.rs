//! Error type shared by every module in this crate.
//!
//! All fallible operations return [`Result`]. Numeric kernels treat NaN and
//! infinity as error states rather than silently propagating them.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error for tensor, model, and analysis operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation that needs at least one element received none.
    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    /// A scalar or structural argument was outside its documented domain.
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A softmax row had every entry masked out.
    #[error("softmax: row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    /// A kernel produced NaN or infinity.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// Token id does not exist in the embedding table.
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    /// Sequence is longer than the model's maximum context.
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// Weight container inconsistent with its manifest; names the offender.
    #[error("weight container: {0}")]
    WeightContainer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}
