use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the fitting pipeline.
///
/// Input problems (`Data`, `Csv`, `Io`, `InvalidArgument`, `Transform`) map to
/// CLI exit code 2; numerical failures map to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Data(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("{0}")]
    Transform(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular design")]
    SingularDesign,

    #[error("insufficient degrees of freedom: N = {n}, p = {p}")]
    InsufficientDof { n: usize, p: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_)
                | Error::Row { .. }
                | Error::Transform(_)
                | Error::InvalidArgument(_)
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::DimensionMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
