use std::path::{Path, PathBuf};

use thiserror::Error;

/// Crate-wide error type.
///
/// The variants map onto the CLI exit-code contract: validation and shape
/// errors exit with 2, I/O errors with 3, and data (malformed file content)
/// errors with 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, arguments, or operation preconditions.
    #[error("validation: {0}")]
    Validation(String),

    /// Dimension or length mismatch between inputs.
    #[error("shape: {0}")]
    Shape(String),

    /// Malformed or corrupt file content.
    #[error("data: {0}")]
    Data(String),

    /// Underlying I/O failure, with the path that triggered it.
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Short lowercase tag for structured logging.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Data(_) => "data",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code under the CLI contract.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Validation(_) | Error::Shape(_) => 2,
            Error::Io { .. } => 3,
            Error::Data(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
