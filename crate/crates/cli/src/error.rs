use std::process::ExitCode;

use thiserror::Error;
use xmar_core::XmarError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl From<XmarError> for CliError {
    fn from(e: XmarError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<xmar_tensor::CheckpointError> for CliError {
    fn from(e: xmar_tensor::CheckpointError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
