use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: byte {offset}: {msg}")]
    Format { path: PathBuf, offset: u64, msg: String },
    #[error(transparent)]
    Core(#[from] warm_core::Error),
}

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io { path: path.to_path_buf(), source }
    }

    pub fn config(path: &Path, msg: impl Into<String>) -> Self {
        AppError::Config { path: path.to_path_buf(), msg: msg.into() }
    }

    pub fn checkpoint(path: &Path, msg: impl Into<String>) -> Self {
        AppError::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
    }

    /// Process exit status: 1 usage or configuration, 2 numeric failure,
    /// 3 input/output.
    pub fn exit_code(&self) -> i32 {
        use warm_core::Error as E;
        match self {
            AppError::Usage(_) | AppError::Config { .. } | AppError::Checkpoint { .. } => 1,
            AppError::Io { .. } | AppError::Format { .. } => 3,
            AppError::Core(e) => match e {
                E::Numeric(_) | E::NotSymmetric(_) | E::UndefinedMetric(_) => 2,
                _ => 1,
            },
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
