//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input values violate a numeric precondition (non-finite, out of range).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A parameter is outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A seed pixel has a (near-)zero feature vector and cannot anchor a cosine.
    #[error("degenerate seed at ({row}, {col}): feature norm below epsilon")]
    DegenerateSeed { row: usize, col: usize },

    /// Two grids that must share a shape do not.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// An operation that requires annotation points received none.
    #[error("empty point set")]
    EmptyPointSet,

    /// Seed exclusion disks left no background pixels to mine.
    #[error("exclusion radius covers the whole image; no background pixels remain")]
    ExclusionCoversImage,

    /// A stop-gradient contract was violated by the caller.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A forward/backward pass produced a non-finite value.
    #[error("numerical failure in {context}")]
    NumericalFailure { context: String },

    /// The finite-difference auditor could not find a kink-free probe point.
    #[error("gradient audit failed: {0}")]
    AuditFailed(String),

    /// Scene synthesis could not place targets/clutter within retry budget.
    #[error("scene generation failed: {0}")]
    GenerationFailed(String),

    /// Checkpoints fed to a soup disagree on parameter segments.
    #[error("incompatible checkpoints: {0}")]
    IncompatibleCheckpoints(String),

    /// Malformed file content (pnm, manifest, checkpoint).
    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
