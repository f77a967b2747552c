use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: header declares {expected} values, file holds {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("optimizer state error: {0}")]
    State(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
