//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by kernel evaluation, target construction, flows, and
/// the optimizers.
#[derive(Debug, Error)]
pub enum KsdError {
    /// Two inputs that must share a dimension do not.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A NaN or infinity showed up where a finite value is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A constructor or operation was handed an invalid parameter.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A matrix that must be invertible is singular or too ill-conditioned
    /// to trust.
    #[error("singular matrix: 1-norm condition estimate {cond:.3e} exceeds {limit:.1e}")]
    Singular { cond: f64, limit: f64 },

    /// An operation that needs at least one element got none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A particle flow produced non-finite positions.
    #[error("flow diverged at iteration {iteration}: {context}")]
    Divergence { iteration: usize, context: String },

    /// The requested operation is not defined for this target.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A dataset failed to load or validate.
    #[error("dataset: {0}")]
    Dataset(String),

    /// Writing a trace or metrics artifact failed.
    #[error("serialization: {0}")]
    Serialization(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KsdError>;
