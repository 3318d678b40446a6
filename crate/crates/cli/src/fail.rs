//! Command failures and their exit codes.

use std::fmt;

/// Exit code 1: bad arguments or a violated precondition.
pub const USAGE: i32 = 1;
/// Exit code 2: unreadable, unwritable or malformed files.
pub const IO: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: IO,
            message: message.into(),
        }
    }
}

impl CliError {
    /// Prefixes the message with the file it concerns.
    pub fn context(self, path: &std::path::Path) -> Self {
        Self {
            code: self.code,
            message: format!("{}: {}", path.display(), self.message),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<xmodal_core::Error> for CliError {
    fn from(e: xmodal_core::Error) -> Self {
        Self {
            code: if e.is_io_or_format() { IO } else { USAGE },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::io(e.to_string())
    }
}
