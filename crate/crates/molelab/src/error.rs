//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible matrix/vector dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// API misuse (stale cache, empty trace, malformed literal, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training aborted on a non-finite loss.
    #[error("divergence at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    /// Filesystem failure, tagged with the offending path.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Serialization/deserialization failure.
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
