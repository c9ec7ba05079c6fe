//! Command-line front end for attnlab: configs, runners and artifact writers.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod output;

/// Failure classes, each with its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad or missing configuration: exit 2.
    #[error("config error: {0}")]
    Config(String),
    /// Divergence, overflow or a failed invariant: exit 1.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 1,
        }
    }

    /// Wraps a library error with the module it came from.
    pub fn module(module: &str, e: attnlab::Error) -> CliError {
        match e {
            attnlab::Error::Invalid(m) => CliError::Config(format!("{module}: {m}")),
            attnlab::Error::Numerical(m) => CliError::Numerical(format!("{module}: {m}")),
        }
    }
}
