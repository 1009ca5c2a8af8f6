//! Error type shared across the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, models, data handling, and the trainer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes or resolutions.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration, parameters out of range, malformed manifests.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed image file, with the byte offset where parsing stopped.
    #[error("malformed image {path} at byte {offset}: {reason}")]
    Image {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    /// Non-finite values or other numerical failures.
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 I/O, 3 config/shape, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Image { .. } => 2,
            Error::Shape(_) | Error::Config(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
