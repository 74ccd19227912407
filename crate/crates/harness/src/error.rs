use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: format error at byte {offset}: {detail}")]
    Format { path: PathBuf, offset: usize, detail: String },
    #[error("{path}: line {line}: {detail}")]
    Log { path: PathBuf, line: usize, detail: String },
    #[error(transparent)]
    Core(#[from] scaledp_core::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit status: 1 usage or configuration, 2 I/O or file
    /// format, 3 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        use scaledp_core::Error as E;
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Io { .. } | Self::Format { .. } | Self::Log { .. } => 2,
            Self::Core(E::Divergence { .. } | E::NonFinite(_)) => 3,
            Self::Core(E::RegistryMismatch { .. }) => 2,
            Self::Core(_) => 1,
        }
    }
}
