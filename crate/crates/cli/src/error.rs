use curveband_core::ErrorCategory;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] curveband_core::Error),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config(_) => ErrorCategory::Config,
            CliError::Data(_) => ErrorCategory::Data,
            CliError::Internal(_) => ErrorCategory::Internal,
        }
    }

    pub fn exit_code(&self) -> i32 {
        exit_code(self.category())
    }
}

pub fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
        ErrorCategory::Internal => 5,
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("json: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
