use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        source: irtrack_core::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] irtrack_core::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    /// Process exit code: 2 for bad input (config, files), 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Input { .. } | HarnessError::Io { .. } => 2,
            HarnessError::Core(_) | HarnessError::Json(_) => 1,
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

pub(crate) fn input_err(path: impl Into<PathBuf>) -> impl FnOnce(irtrack_core::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Input { path, source }
}
