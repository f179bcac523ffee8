use std::path::PathBuf;

use thiserror::Error;

/// Failures of a command, each mapped to a documented exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] momix::Error),
}

impl CliError {
    pub fn input(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Input {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        use momix::Error as E;
        match self {
            Self::Usage(_) => 2,
            Self::Input { .. } | Self::Io { .. } => 3,
            Self::Core(e) => match e {
                E::NoConvergence(_) | E::Underdetermined { .. } | E::Inconsistent { .. } => 4,
                E::Extraction(_)
                | E::NoRowBasis(_)
                | E::RankTooSmall { .. }
                | E::SingularBlock { .. } => 5,
                _ => 3,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
