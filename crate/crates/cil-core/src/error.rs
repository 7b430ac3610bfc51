//! Error type shared across the toolkit.
//!
//! Variants map onto the CLI exit codes: config errors exit 1, data errors
//! exit 2, numerical failures exit 3.

use std::fmt;

/// Toolkit-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration (bad field values, unknown keys, inconsistent sections).
    Config(String),
    /// Invalid data: malformed files, mismatched shapes or manifests, label
    /// violations, missing model parts.
    Data(String),
    /// Numerical failure, e.g. a non-finite training loss.
    Numerical(String),
    /// I/O failure while reading or writing artifacts.
    Io(std::io::Error),
}

impl Error {
    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_cli_contract() {
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::Data("x".into()).exit_code(), 2);
        assert_eq!(
            Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "x")).exit_code(),
            2
        );
        assert_eq!(Error::Numerical("x".into()).exit_code(), 3);
    }
}
