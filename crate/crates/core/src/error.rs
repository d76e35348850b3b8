use thiserror::Error;

/// Error type shared by all modules.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// An operation was called with inconsistent or missing arguments.
    #[error("usage error: {0}")]
    Usage(String),
    /// A configuration is internally inconsistent (e.g. Peclet violation
    /// with upwinding disabled).
    #[error("configuration error: {0}")]
    Config(String),
    /// A numerical procedure failed (singular system, non-finite values).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Input data is malformed or contains non-finite values.
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for validation problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
