//! Crate-wide error type.
//!
//! Every fallible operation in the pipeline returns [`Result`]. Variants are
//! grouped by which stage of the pipeline they come from so callers (and the
//! CLI) can report something actionable without string-matching.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected shape) are incompatible.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A cohort file failed to parse or failed a consistency check.
    /// `row` is the 1-based line number in the file (0 for file-level issues).
    #[error("cohort ingest error at line {row}: {msg}")]
    Ingest { row: usize, msg: String },

    /// A checkpoint file is malformed, truncated, or corrupt.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An off-policy estimator cannot produce a finite answer.
    #[error("estimator error: {0}")]
    Estimator(String),

    /// The optimization loop left the stable regime.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A run configuration is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A finite-difference audit found a gradient outside tolerance.
    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for a [`Error::Contract`] with a formatted message.
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
