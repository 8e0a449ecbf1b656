use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MuserError>;

#[derive(Debug, Error)]
pub enum MuserError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing template field `{0}`")]
    MissingField(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MuserError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MuserError::InvalidArgument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        MuserError::Format(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        MuserError::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MuserError::Io {
            path: path.into(),
            source,
        }
    }
}
