use thiserror::Error;

/// Errors raised anywhere in the library. The CLI maps each kind to an exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("iterate diverged at step {t} (coordinate {coord}, value {value})")]
    Divergence { t: usize, coord: usize, value: f64 },

    #[error("fixed-point iteration did not converge after {iterations} steps (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), reason: reason.into() }
    }

    /// Process exit code: 2 for configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation { .. } | Error::Io(_) => 2,
            Error::Numerical(_) | Error::Divergence { .. } | Error::NotConverged { .. } => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(format!("line {}, column {}: {}", e.line(), e.column(), e))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(std::io::Error::other(e.to_string()))
    }
}
