use std::path::PathBuf;

use auseg::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_CORRUPT: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Engine(#[from] Error),

    #[error("corrupt checkpoint {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
            CliError::Corrupt { .. } => EXIT_CORRUPT,
            CliError::Engine(e) => match e {
                // Shape errors reaching the CLI come from the inputs the
                // user configured, e.g. extents the depth cannot divide.
                Error::Config(_) | Error::Shape(_) => EXIT_CONFIG,
                Error::Data(_) | Error::DataAt { .. } | Error::Io { .. } | Error::Contract(_) => EXIT_DATA,
                Error::Numeric(_) => EXIT_NUMERIC,
            },
        }
    }
}
