use std::fmt;
use std::path::Path;

use graybox_core::Error;

/// A failed command: process exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_MISSING: u8 = 5;

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    /// Fails with exit 5 unless `path` exists.
    pub fn require(path: &Path, what: &str) -> Result<(), Failure> {
        if path.exists() {
            Ok(())
        } else {
            Err(Failure {
                code: EXIT_MISSING,
                message: format!("{what} {} not found", path.display()),
            })
        }
    }

    /// Any error while reading a user-supplied input file is a config error.
    pub fn from_config_load(e: Error) -> Self {
        Failure::config(e.to_string())
    }
}

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Format(_) => EXIT_CONFIG,
        Error::Io(_) => EXIT_IO,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Example { source, .. } => code_of(source),
        _ => EXIT_INTERNAL,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: code_of(&e),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            Failure::io(e.to_string())
        } else {
            Failure::config(e.to_string())
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
