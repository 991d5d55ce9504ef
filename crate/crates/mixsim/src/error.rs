//! Error taxonomy shared across the toolkit.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The requested quantity is undefined for the supplied data
    /// (e.g. a balance measure on a design without both predictors).
    #[error("undefined for this input: {0}")]
    Undefined(String),

    /// A linear system that must be positive definite was not.
    #[error("singular or non-positive-definite system: {0}")]
    Singular(String),

    /// The response admits a degenerate likelihood (single-class outcome,
    /// complete separation) and no finite estimate exists.
    #[error("degenerate likelihood: {0}")]
    DegenerateLikelihood(String),

    /// An iterative routine exhausted its budget without meeting its
    /// internal tolerance and no usable state is available.
    #[error("iteration failed to converge: {0}")]
    IterationFailure(String),

    /// Persisted experiment state disagrees with the requested
    /// configuration (seed or config mismatch on resume).
    #[error("experiment state mismatch: {0}")]
    StateMismatch(String),

    /// Malformed persisted record or dataset file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}
