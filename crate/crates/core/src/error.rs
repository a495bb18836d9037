use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Configuration or shape contract violation.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset layout, file or decoding problem.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value where a finite one is required (training aborts).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code convention: 2 usage/config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Json(_) | Error::Image(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
