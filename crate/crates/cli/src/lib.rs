//! Experiment runner: config files in, metrics and artifacts out.

pub mod compare;
pub mod config;
pub mod experiment;
pub mod output;
pub mod suites;

use std::path::PathBuf;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing data file {path}: {hint}")]
    MissingData { path: PathBuf, hint: String },
    #[error("assertion failed: {0}")]
    Assertion(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] bdk_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 ok, 1 assertion failed, 2 configuration or input problem, 3 runtime failure.
    pub fn exit_code(&self) -> i32 {
        use bdk_core::Error as E;
        match self {
            CliError::Assertion(_) => 1,
            CliError::Config(_) | CliError::MissingData { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Diverged { .. } | E::EmptyEnsemble | E::Io(_) => 3,
                _ => 2,
            },
        }
    }
}

/// Data directory: `$BDK_DATA_DIR`, else `data/` under the current directory.
pub fn data_dir() -> PathBuf {
    std::env::var_os("BDK_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}
