use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes disagree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation was called in the wrong lifecycle state
    /// (backward before forward, optimizer step without gradients, ...).
    #[error("state error: {0}")]
    State(String),

    /// Invalid configuration value or combination of values.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid input data (labels out of range, malformed rows, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A loss or parameter became non-finite; training aborted.
    #[error("numerical fault: {0}")]
    NumericalFault(String),

    #[error("bad dataset file: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
