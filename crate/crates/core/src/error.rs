use thiserror::Error;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Internal,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Internal => "internal",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("duplicate unit id {id:?} at row {row}")]
    DuplicateId { id: String, row: usize },

    #[error("design support has {size} samples, above the limit of {limit}")]
    SupportTooLarge { size: u128, limit: u128 },

    #[error("no fixed-size sample accepted after {attempts} attempts")]
    AttemptsExceeded { attempts: u64 },

    #[error("calibration did not converge after {iterations} iterations (sup-norm gap {gap:e})")]
    NonConvergence { iterations: usize, gap: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidInput(_) | Error::SupportTooLarge { .. } => ErrorCategory::Config,
            Error::Parse { .. } | Error::DuplicateId { .. } | Error::Io(_) | Error::Csv(_) => {
                ErrorCategory::Data
            }
            Error::AttemptsExceeded { .. } | Error::NonConvergence { .. } | Error::Numeric(_) => {
                ErrorCategory::Numeric
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
