//! Application error with the exit-code split the CLI promises:
//! validation problems exit 1, runtime failures exit 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl AppError {
    pub fn validation(msg: impl Into<String>) -> Self {
        AppError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        AppError::Runtime(msg.into())
    }

    /// Core-library errors surface as runtime failures unless a caller
    /// classifies them otherwise.
    pub fn from_core(e: semimultipose_core::Error) -> Self {
        AppError::Runtime(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
