//! Command implementations behind the `bmsmoe` binary.
//!
//! Exit codes: 0 on success, 1 on I/O or processing failure, 2 on invalid
//! configuration or arguments.

pub mod commands;
pub mod config;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Exit code 1.
    Io(String),
    /// Exit code 2.
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Config(m) => m,
        }
    }

    fn stdout(e: std::io::Error) -> Self {
        CliError::Io(format!("cannot write to standard output: {e}"))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl std::error::Error for CliError {}

impl From<bmsmoe::Error> for CliError {
    fn from(e: bmsmoe::Error) -> Self {
        use bmsmoe::Error as E;
        match e {
            E::InvalidArgument(_) | E::OutOfBounds { .. } => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}
