//! Error type shared across the crate.
//!
//! Errors are grouped into coarse categories so callers (notably the CLI)
//! can map them onto process exit codes: validation problems exit with 2,
//! numerical failures with 3.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Bad inputs: shape mismatches, invalid paths, malformed configs or files.
    Validation(String),
    /// Non-finite values, diverged training, failed statistical checks.
    Numerical(String),
    /// An exact-computation size guard was exceeded.
    SizeGuard(String),
    Io(std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn size_guard(msg: impl Into<String>) -> Self {
        Error::SizeGuard(msg.into())
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::SizeGuard(_) | Error::Io(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Error::SizeGuard(msg) => write!(f, "size guard exceeded: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
