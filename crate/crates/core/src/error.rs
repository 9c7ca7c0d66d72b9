use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value produced or consumed by a kernel is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid configuration; `field` names the offending key.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    /// Invalid input data (empty tensors, unknown layers, out-of-range timesteps).
    #[error("input error: {0}")]
    Input(String),

    #[error("trace error at line {line}: {message}")]
    Trace { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI, one per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Io { .. } => 3,
            Error::Json(_) | Error::Csv(_) | Error::Trace { .. } => 4,
            Error::Dimension(_) | Error::NonFinite(_) | Error::Input(_) => 5,
        }
    }
}
