//! Command-line driver for phantom generation, training, embedding and evaluation.

pub mod commands;
pub mod config;
pub mod plots;

use std::fmt;

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Invalid or inconsistent configuration (exit code 2).
    Config(String),
    /// Anything that went wrong while running (exit code 3).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ape_core::Error> for CliError {
    fn from(e: ape_core::Error) -> Self {
        match e {
            ape_core::Error::InvalidConfig(_) | ape_core::Error::InvalidSpec(_) => CliError::Config(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}
