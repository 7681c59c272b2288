use std::process::ExitCode;

/// Failure of a command, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configuration, or input files.
    #[error("{0}")]
    Usage(String),
    /// Divergence or a failed invariant.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Usage(_) => ExitCode::from(1),
            Self::Numerical(_) => ExitCode::from(2),
        }
    }
}

impl From<stcflow::Error> for CliError {
    fn from(e: stcflow::Error) -> Self {
        match e {
            stcflow::Error::Divergence { .. } | stcflow::Error::NonFinite(_) => Self::Numerical(e.to_string()),
            other => Self::Usage(other.to_string()),
        }
    }
}

/// Attaches the offending path to an I/O or library error.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| match e.into() {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", what())),
            CliError::Numerical(m) => CliError::Numerical(format!("{}: {m}", what())),
        })
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Usage(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
