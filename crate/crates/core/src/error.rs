//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants map onto the CLI exit-code contract:
/// usage problems are handled by the argument parser, data problems
/// (`Format`, `Compatibility`, ...) exit 2, property failures exit 3.
#[derive(Debug, Error)]
pub enum MiError {
    /// A caller-supplied value violates an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A persisted file is malformed (bad magic, truncated payload,
    /// shape mismatch). The message names the offending field/tensor.
    #[error("format error: {0}")]
    Format(String),

    /// An artifact was built against a different model (fingerprint or
    /// version mismatch).
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// Bank construction kept zero positions.
    #[error("empty bank: {0}")]
    EmptyBank(String),

    /// A steering plan references sites outside the model's range or is
    /// missing bank slots for a selected site.
    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    /// Inconsistent routing/selector configuration.
    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MiError>;

impl MiError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MiError::InvalidArgument(msg.into())
    }
}
