use std::path::PathBuf;

use clzsl_core::data::DataError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: line {line}, column {column}: {message}")]
    ConfigSyntax {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    ConfigField { path: PathBuf, message: String },
    #[error("{path} already exists (pass --force to overwrite)")]
    Exists { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: row {row}: {message}")]
    MalformedWeights { path: PathBuf, row: usize, message: String },
    #[error(transparent)]
    Core(#[from] clzsl_core::Error),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage/config, 2 data integrity, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use clzsl_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::ConfigSyntax { .. } | CliError::ConfigField { .. } | CliError::Exists { .. } => 1,
            CliError::Io { .. } | CliError::Csv { .. } | CliError::MalformedWeights { .. } => 2,
            CliError::Core(e) => match e {
                E::NonFiniteLoss { .. } => 3,
                E::Config(_) | E::LabelOutOfRange { .. } | E::NotSeenClass { .. } => 1,
                E::Tensor(_) | E::Data(_) | E::Empty(_) | E::Integrity(_) | E::Io { .. } | E::Json { .. } => 2,
            },
        }
    }
}
