use std::io;

use tiermoe_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    /// Process exit status: 1 verification failure (and other runtime
    /// failures), 2 configuration error, 3 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Core(CoreError::Numeric(_)) => 3,
            _ => 1,
        }
    }
}
