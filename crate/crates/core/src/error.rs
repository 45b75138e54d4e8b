use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the library. File-system failures are kept apart from
/// validation failures so the CLI can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("bad magic bytes {found:?}, expected \"FGPC1\"")]
    BadMagic { found: Vec<u8> },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stale tape: parameters changed since the forward pass")]
    StaleTape,

    #[error("could not place object {index} ({shape}) after {attempts} attempts")]
    Placement {
        index: usize,
        shape: String,
        attempts: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
