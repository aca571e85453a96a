use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    /// Malformed or contradictory input data (manifests, labels, configs).
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor or batch dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values or degenerate numeric input (zero norms, NaN losses).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Batch sampling cannot satisfy its contract.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Hard-negative mining found no candidate.
    #[error("mining error: {0}")]
    Mining(String),

    /// An operation was called before its prerequisite state exists.
    #[error("state error: {0}")]
    State(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class for the CLI: 2 for data/validation trouble,
    /// 3 for numeric trouble. Usage errors (1) never reach this type.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
