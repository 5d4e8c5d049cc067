//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum GrandeError {
    /// Invalid hyperparameter or configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Problem with the input data (CSV contents, labels, shapes).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure during training or checking (non-finite values, failed tolerance).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or incompatible model file.
    #[error("model file error: {0}")]
    Model(String),

    /// Command-line usage error.
    #[error("usage error: {0}")]
    Usage(String),

    /// I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Internal invariant violation; indicates a bug.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, GrandeError>;

impl GrandeError {
    /// Process exit code for the CLI: 1 usage, 2 data/config, 3 numeric/internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            GrandeError::Usage(_) => 1,
            GrandeError::Config(_) | GrandeError::Data(_) | GrandeError::Model(_) | GrandeError::Io(_) => 2,
            GrandeError::Numeric(_) | GrandeError::Internal(_) => 3,
        }
    }
}
