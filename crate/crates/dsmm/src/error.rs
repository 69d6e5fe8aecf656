use std::path::{Path, PathBuf};

use dsmm_core::Error as CoreError;

/// Failures surfaced by the command line, each mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Core(CoreError),
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Output { path: PathBuf, message: String },
    #[error("training diverged: {0}")]
    Diverged(CoreError),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
}

impl CliError {
    /// 1 invalid configuration, format or geometry; 2 unreadable input or
    /// unwritable output; 3 non-finite loss; 4 gradient check failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Format { .. } | CliError::Core(_) => 1,
            CliError::Input { .. } | CliError::Output { .. } => 2,
            CliError::Diverged(_) => 3,
            CliError::Gradcheck(_) => 4,
        }
    }

    pub fn input(path: &Path, message: impl ToString) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn output(path: &Path, message: impl ToString) -> Self {
        CliError::Output {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn format(path: &Path, message: impl ToString) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFiniteLoss { .. } => CliError::Diverged(e),
            CoreError::Invalid { .. } => CliError::Config(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
