use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or mechanism string. Exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Input data that violates the schema or cannot be read. Exit code 2.
    #[error("{0}")]
    Validation(String),
    /// No requested estimate could be computed. Exit code 3.
    #[error("{0}")]
    Undefined(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Undefined(_) => 3,
        }
    }

    pub fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<spillover::Error> for CliError {
    fn from(e: spillover::Error) -> Self {
        match e {
            spillover::Error::Undefined(u) => CliError::Undefined(u.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}
