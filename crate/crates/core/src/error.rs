//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A file could not be parsed (ragged rows, non-numeric cells, bad magic).
    #[error("parse error: {0}")]
    Parse(String),

    /// Structurally valid input that violates a cross-field contract
    /// (label length mismatch, channel-count mismatch).
    #[error("schema error: {0}")]
    Schema(String),

    /// Values that are syntactically fine but unusable (NaN/Inf cells, empty stream).
    #[error("data error: {0}")]
    Data(String),

    /// A length/size precondition failed (window longer than series, patch longer than window).
    #[error("size error: {0}")]
    Size(String),

    /// Invalid synthetic-generator parameters.
    #[error("generator spec error: {0}")]
    GeneratorSpec(String),

    /// Tensor shape mismatch between operands or against parameters.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (bad key, inconsistent hyperparameters, coverage gap).
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values where finite ones are required.
    #[error("numerics error: {0}")]
    Numerics(String),

    /// Weight archive or checkpoint problems (missing tensor, checksum, version).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Labels unsuitable for the requested metric (single class, no events).
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    /// Peak-allocation measurement requested without a tracking allocator installed.
    #[error("measurement unavailable: {0}")]
    MeasureUnavailable(String),
}
