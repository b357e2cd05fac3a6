use fastkv_core::Error;
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for missing or malformed data,
    /// 4 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::EmptyModel(_) | Error::PositionOverflow { .. } => 2,
                Error::Data(_) | Error::Io { .. } | Error::Format(_) => 3,
                Error::Numeric(_) => 4,
                Error::Shape(_) | Error::InvalidInput(_) => 1,
            },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
