use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] midus::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {}: {detail}", path.display())]
    Checkpoint { path: PathBuf, detail: String },
    #[error("gradcheck failed: {0}")]
    Gradcheck(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CliError::Checkpoint {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// 2 for configuration problems, 3 for numeric aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_)
            | CliError::Core(midus::Error::Config(_))
            | CliError::Core(midus::Error::Unknown { .. }) => 2,
            CliError::Core(midus::Error::NumericAbort { .. }) | CliError::Core(midus::Error::NonFinite(_)) => 3,
            _ => 1,
        }
    }
}
