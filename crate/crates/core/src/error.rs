//! Crate-wide error type with the exit-code taxonomy used by the CLI.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Run configuration could not be parsed or contains invalid values.
    #[error("config error: {0}")]
    Config(String),

    /// Input data failed a structural or content check.
    #[error("validation error: {0}")]
    Validation(String),

    /// Filesystem / decode failure, with the offending path.
    #[error("io error at {path}: {msg}")]
    Io { path: PathBuf, msg: String },

    /// Numeric or other runtime failure (divergence, bad shapes at run time).
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Io {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn from_io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            msg: err.to_string(),
        }
    }

    /// Short machine-parseable class name, printed as `error[<class>]: ...`
    /// by the CLI and mapped to its exit code.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Io { .. } => "io",
            Error::Runtime(_) => "runtime",
        }
    }

    /// CLI exit code: 2 = config, 3 = data (validation or I/O), 4 = runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Validation(_) | Error::Io { .. } => 3,
            Error::Runtime(_) => 4,
        }
    }
}
