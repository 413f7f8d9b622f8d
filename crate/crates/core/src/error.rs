use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input or configuration rather than a
    /// failure while running a pipeline.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_) | Error::Format(_) | Error::Validation(_) | Error::Config(_)
        )
    }
}

macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Parameter(format!($($arg)*)) };
}
pub(crate) use param_err;
