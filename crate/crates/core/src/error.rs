use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("cannot read {path}: {source}")]
    Load { path: PathBuf, source: std::io::Error },

    #[error("{file}:{line}: field '{field}': {message}")]
    Parse { file: String, line: usize, field: String, message: String },

    #[error("clinical record is missing required fields: {}", .0.join(", "))]
    MissingFields(Vec<String>),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Nn(#[from] sleepcbm_nn::NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// Validation-type errors map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CoreError::Load { .. }
                | CoreError::Parse { .. }
                | CoreError::MissingFields(_)
                | CoreError::Validation(_)
                | CoreError::Config(_)
                | CoreError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::Validation(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}
