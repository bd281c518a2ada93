//! Command-line driver and HTTP service for `partlayout`.

pub mod cli;
pub mod config;
pub mod server;

use std::fmt;

/// Process exit status classes.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or requests; exit code 1.
    Validation(String),
    /// Anything that failed while running; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<partlayout::Error> for CliError {
    fn from(e: partlayout::Error) -> Self {
        use partlayout::Error::*;
        match e {
            Config(_) | InvalidEdit(_) | Shape(_) | Degenerate(_) | Json(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
