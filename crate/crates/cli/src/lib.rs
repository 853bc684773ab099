//! Command-line front end: configuration, the profile registry, run
//! directories and manifests.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod registry;

use serde::Serialize;
use thiserror::Error;

pub use config::{Command, RunConfig};

/// Process exit codes.
pub mod exit {
    pub const PASS: i32 = 0;
    pub const CERTIFICATE_FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config field `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("conflicting settings: {0}")]
    Conflict(String),

    #[error("profile `{spec}`: {reason}")]
    Profile { spec: String, reason: String },

    #[error("tabulated profile {path}: byte offset {offset}: {reason}")]
    Table {
        path: String,
        offset: usize,
        reason: String,
    },

    #[error("i/o: {0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] rtspectra::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use rtspectra::Error as E;
        match self {
            CliError::Core(
                E::InvalidDomain(_)
                | E::InvalidParameter { .. }
                | E::InvalidProfile(_)
                | E::NonpositiveWeight { .. },
            ) => exit::USAGE,
            CliError::Core(_) | CliError::Io(_) => exit::NUMERICAL,
            _ => exit::USAGE,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::Conflict(_) => "conflict",
            CliError::Profile { .. } => "profile",
            CliError::Table { .. } => "tabulated_profile",
            CliError::Io(_) => "io",
            CliError::Core(_) => "numerical",
        }
    }

    pub fn record(&self) -> FailureRecord {
        FailureRecord {
            kind: self.kind().into(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        }
    }
}

/// Machine-readable failure, written to `failure.json` and stderr.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FailureRecord {
    pub kind: String,
    pub exit_code: i32,
    pub message: String,
}
