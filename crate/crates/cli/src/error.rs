//! CLI error taxonomy mapped onto process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// 2 = config error, 3 = data error, 4 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<cospeech_core::CoreError> for CliError {
    fn from(e: cospeech_core::CoreError) -> Self {
        use cospeech_core::CoreError::*;
        match e {
            NonFinite(what) => CliError::Numeric(format!("non-finite value in {what}")),
            InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
