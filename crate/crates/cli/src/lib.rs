//! Command-line driver: synthetic data, phase training, inference, fusion,
//! cues, evaluation and reporting, all under one run directory.

pub mod cli;
pub mod commands;
pub mod config;
pub mod layout;
pub mod metrics;

use std::fmt;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ARTIFACT: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

/// A one-line diagnostic plus the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn artifact(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_ARTIFACT,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<twophase::Error> for CliError {
    fn from(e: twophase::Error) -> Self {
        use twophase::Error as E;
        let code = match e {
            E::Io { .. } | E::MissingArtifact(_) | E::Format { .. } => EXIT_ARTIFACT,
            E::Config(_) | E::InvalidArgument { .. } | E::Shape { .. } => EXIT_VALIDATION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
