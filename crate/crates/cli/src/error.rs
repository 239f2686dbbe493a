use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] lsfd_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("output error: {0}")]
    Output(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    /// Process exit code: 1 usage, 2 numeric or runtime failure, 3 failed verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(lsfd_core::Error::Config(_)) | CliError::Core(lsfd_core::Error::Argument(_)) => 1,
            CliError::Core(lsfd_core::Error::Numeric(_)) | CliError::Io(_) | CliError::Output(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
