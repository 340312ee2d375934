use std::fmt;
use std::process::ExitCode;

use denkf_core::Error;

/// Failure classes with a stable process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or inputs: exit code 2.
    Usage(String),
    /// Non-finite loss or filter divergence: exit code 3.
    Numeric(String),
    /// Anything else: exit code 1.
    Failed(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Self::Usage(_) => 2,
            Self::Numeric(_) => 3,
            Self::Failed(_) => 1,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Numeric(m) | Self::Failed(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Divergence { .. } | Error::Training(_) => Self::Numeric(msg),
            Error::Io(ref io) if io.kind() != std::io::ErrorKind::NotFound => Self::Failed(msg),
            Error::State(_) => Self::Failed(msg),
            _ => Self::Usage(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        Self::Usage(format!("config: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Usage(format!("manifest: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
