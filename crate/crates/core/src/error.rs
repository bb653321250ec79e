use std::path::PathBuf;

use phnet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhnetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in `{field}`: {msg}")]
    Format { field: String, msg: String },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, PhnetError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(PhnetError::InvalidArgument(msg.into()))
}

pub(crate) fn format_err(field: &str, msg: impl Into<String>) -> PhnetError {
    PhnetError::Format { field: field.to_string(), msg: msg.into() }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> PhnetError {
    let path = path.into();
    move |source| PhnetError::Io { path, source }
}

impl From<PhnetError> for TensorError {
    fn from(e: PhnetError) -> Self {
        match e {
            PhnetError::Tensor(t) => t,
            other => TensorError::InvalidArgument(other.to_string()),
        }
    }
}
