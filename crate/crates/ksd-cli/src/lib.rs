//! Command-line experiment runner around the `ksd` library.
//!
//! The binary exposes three subcommands: `run` executes an experiment
//! described by a flat config file and persists traces plus a metrics JSON,
//! `generate` writes synthetic datasets (with their ground truth) to CSV,
//! and `check` runs the numerical self-tests. Everything is seeded, so a
//! given config reproduces its metrics bit for bit apart from the recorded
//! runtime.

use std::fmt;

pub mod check;
pub mod config;
pub mod experiments;
pub mod output;

/// Errors split by exit code: config problems exit 1, runtime failures
/// (divergence, I/O mid-run, numerical breakdown) exit 2.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<ksd::KsdError> for CliError {
    fn from(e: ksd::KsdError) -> Self {
        match e {
            ksd::KsdError::InvalidParameter(_)
            | ksd::KsdError::DimensionMismatch { .. }
            | ksd::KsdError::EmptyInput(_)
            | ksd::KsdError::Dataset(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
