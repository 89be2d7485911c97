use std::path::{Path, PathBuf};

pub type Result<T, E = AppError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] crane_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{0}")]
    Invalid(String),
}

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    /// 2 for I/O failures, 1 for everything that failed validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Io { .. } => 2,
            _ => 1,
        }
    }
}
