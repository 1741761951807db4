//! Time-study command line: train and evaluate clip classifiers, print
//! dataset statistics, generate synthetic footage, and turn long videos into
//! work-element timelines.

pub mod commands;
pub mod segment;

use std::fmt;

/// Failure of a command, mapped onto the process exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(forestvid::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use forestvid::ErrorKind;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<forestvid::Error> for CliError {
    fn from(e: forestvid::Error) -> Self {
        CliError::Core(e)
    }
}
