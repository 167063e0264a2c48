use std::fmt;

/// A failed command, carrying its process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Invalid configuration or unusable paths: exit 1.
    Config(String),
    /// Reading or writing files failed: exit 1.
    Io(String),
    /// The integrator or the characterization failed: exit 2.
    Integration(String),
    /// At least one verification claim failed: exit 3.
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Integration(_) => 2,
            CliError::Verify(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Integration(m) => write!(f, "integration failed: {m}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
