use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] apnorm::error::Error),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn usage(detail: impl Into<String>) -> Self {
        CliError::Usage(detail.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Verification(_) => 5,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(apnorm::error::Error::InvalidArgument { .. }) => 2,
            CliError::Core(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io(path: &std::path::Path, source: std::io::Error) -> CliError {
    CliError::Core(apnorm::error::Error::Io { path: path.to_path_buf(), source })
}
