//! Error type shared across the library.

use thiserror::Error;

/// Failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input value or combination of values is out of its legal range.
    #[error("invalid input: {0}")]
    Validation(String),

    /// Two coupled containers disagree on length or shape.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A text or binary input could not be decoded.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// A requested waveform or variable set violates a hardware limit.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A target region resolved to zero voxels.
    #[error("empty region: {0}")]
    EmptyRegion(String),

    /// An iterative routine failed to make numerical progress.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// File system access failed.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
