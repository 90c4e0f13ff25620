use std::path::PathBuf;

/// Errors raised across the crate.
///
/// The variants map onto the exit-code classes used by the command line:
/// contract and configuration failures are user errors, missing inputs are
/// reported separately so callers can tell them apart.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared during a forward or backward pass.
    #[error("numeric failure in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    /// The configuration is inconsistent with the data it is applied to.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing input: {}", .0.display())]
    Missing(PathBuf),

    /// A file exists but does not parse as the expected format.
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("nondeterministic function: {0}")]
    Nondeterministic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Early-return a [`Error::Contract`] when the condition does not hold.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Contract(format!($($arg)+)));
        }
    };
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
