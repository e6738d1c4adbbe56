use thiserror::Error;
use xmar_tensor::{CheckpointError, TensorError};

pub type Result<T, E = XmarError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum XmarError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("png: {0}")]
    Png(String),
}

impl XmarError {
    pub(crate) fn invalid(reason: impl Into<String>) -> Self {
        XmarError::Invalid(reason.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        XmarError::Io { path: path.display().to_string(), source }
    }
}
