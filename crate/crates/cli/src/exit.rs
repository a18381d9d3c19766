use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use codesign::Error;

pub const OK: u8 = 0;
pub const CHECK_FAILED: u8 = 1;
pub const IO_OR_SCHEMA: u8 = 2;
pub const NUMERIC_ABORT: u8 = 3;
pub const USAGE: u8 = 64;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Failure {
            code: IO_OR_SCHEMA,
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn io_other(path: &Path, err: impl fmt::Display) -> Self {
        Failure {
            code: IO_OR_SCHEMA,
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Numeric(_) | Error::NumericAbort { .. } => NUMERIC_ABORT,
            _ => IO_OR_SCHEMA,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Validation failures of command-line values are usage errors.
pub fn usage_on_err<T>(result: codesign::Result<T>) -> Result<T, Failure> {
    result.map_err(|e| Failure::usage(e.to_string()))
}
