use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A hyperparameter or configuration value is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (wrong call order, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data failed validation.
    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file did not match the expected container or image format.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint was produced against a different frozen backbone.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// Training diverged.
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
