use std::fmt;

use hcl_core::Error as CoreError;

/// CLI-level failures, mapped onto process exit codes:
/// usage problems are 1, data/format/I-O problems are 2, and a
/// non-finite loss during training is 3.
pub enum AppError {
    Usage(String),
    Core(CoreError),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Core(CoreError::NonFinite { .. }) => 3,
            AppError::Core(_) => 2,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(msg) => write!(f, "{msg}"),
            AppError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        AppError::Core(e)
    }
}
