use std::fmt;

/// Errors raised anywhere in the training and evaluation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("format error: {0}")]
    Format(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl fmt::Display) -> Self {
        Error::Dimension(msg.to_string())
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 is shared by configuration and usage problems, 3 marks a tripped
    /// divergence guard and 4 any other numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Divergence { .. } => 3,
            Error::Numeric(_) | Error::Domain(_) => 4,
            _ => 1,
        }
    }
}
