use std::fmt;
use std::path::PathBuf;

use fuselab_core::CoreError;

/// Process exit status: 0 success, 1 configuration error, 2 runtime failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    ConfigError = 1,
    RuntimeError = 2,
}

#[derive(Debug)]
pub enum LabError {
    Config(String),
    Io { path: PathBuf, source: std::io::Error },
    Core(CoreError),
}

impl LabError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            LabError::Config(_) => ExitCode::ConfigError,
            _ => ExitCode::RuntimeError,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
        let path = path.into();
        move |source| LabError::Io { path, source }
    }
}

impl fmt::Display for LabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabError::Config(msg) => write!(f, "config error: {msg}"),
            LabError::Io { path, source } => {
                write!(f, "io error on {}: {source}", path.display())
            }
            LabError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LabError {}

impl From<CoreError> for LabError {
    fn from(e: CoreError) -> Self {
        LabError::Core(e)
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
