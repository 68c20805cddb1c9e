//! Batch runner around the `robustmv` solver: configuration, orchestration
//! of solve / evaluate / compare / oracle-check runs and artifact files.

pub mod artifacts;
pub mod config;
pub mod run;

use std::path::PathBuf;

pub use config::{Case, Guess, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] robustmv::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },

    /// A verification run finished but found failures.
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    /// 2 for configuration and domain errors, 3 for numerical failures,
    /// 4 for incompatible artifacts, 1 for I/O and failed checks.
    pub fn exit_code(&self) -> i32 {
        use robustmv::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Factorization { .. }) => 3,
            CliError::Core(E::Incompatible(_)) => 4,
            CliError::Core(_) => 2,
            CliError::Parse { .. } => 4,
            CliError::Io { .. } | CliError::Check(_) => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
