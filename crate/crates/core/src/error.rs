use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token index {index} out of range for {rows} rows")]
    TokenOutOfRange { index: usize, rows: usize },

    #[error("token {index} ({text:?}) is a special token")]
    SpecialToken { index: usize, text: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("zero-norm feature vector")]
    ZeroNorm,

    #[error("insufficient samples: {0}")]
    Insufficient(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
