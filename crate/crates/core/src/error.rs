use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, pairing).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file or document did not match its declared layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training produced a non-finite value.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Evaluation(_) => 1,
            Error::Format(_) | Error::Io { .. } => 2,
            Error::Divergence(_) => 3,
        }
    }

    /// Single-token prefix for machine-parseable error lines.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Contract(_) => "E_CONTRACT",
            Error::Format(_) => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::Divergence(_) => "E_DIVERGENCE",
            Error::Evaluation(_) => "E_EVAL",
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        // a NaN comparison is false, so it fails the check
        match $cond {
            true => {}
            false => return Err($crate::error::Error::Contract(format!($($arg)+))),
        }
    };
}
pub(crate) use ensure;
