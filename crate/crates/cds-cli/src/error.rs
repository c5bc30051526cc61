//! CLI-level errors and their process exit codes.

use std::path::PathBuf;

use cds_core::CdsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(CdsError),
}

impl AppError {
    /// 0 success, 2 config error, 3 I/O error, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Io { .. } | AppError::Parse { .. } => 3,
            AppError::Numeric(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AppError {
        let path = path.into();
        move |source| AppError::Io { path, source }
    }
}

impl From<CdsError> for AppError {
    fn from(e: CdsError) -> Self {
        match e {
            CdsError::InvalidConfig(msg) => AppError::Config(msg),
            other => AppError::Numeric(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
