use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] slkd_core::Error),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 usage, 3 I/O, 4 contract, 5 numeric-check failure.
    pub fn exit_code(&self) -> i32 {
        use slkd_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(E::Io(_) | E::Format(_) | E::Parse { .. }) => 3,
            CliError::Core(E::Contract(_) | E::Dimension(_)) => 4,
            CliError::Core(E::Numeric(_)) | CliError::CheckFailed(_) => 5,
        }
    }
}
