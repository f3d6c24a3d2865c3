use std::fmt;

/// Failure classes mapped to process exit codes: usage errors exit 2,
/// runtime/data failures exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Failure(msg) => f.write_str(msg),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Runtime failure tagged with the pipeline stage that hit it.
pub fn fail(stage: &str, msg: impl fmt::Display) -> CliError {
    CliError::Failure(format!("{stage}: {msg}"))
}

pub type Result<T> = std::result::Result<T, CliError>;
