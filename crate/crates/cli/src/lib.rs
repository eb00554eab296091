//! Experiment harness behind the `negotiate` binary: JSON experiment
//! configs, single runs with their artifacts, baseline-vs-negotiated seed
//! sweeps with markdown/CSV reports, dataset verification and gradient
//! checks.

pub mod config;
pub mod experiment;
pub mod report;

use std::path::PathBuf;

pub use config::ExperimentConfig;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const RUNTIME: i32 = 1;
    pub const MISSING_DATA: i32 = 2;
    pub const DIGEST_MISMATCH: i32 = 3;
    pub const USAGE: i32 = 64;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("missing data file(s): {}", list(.0))]
    MissingData(Vec<PathBuf>),

    #[error("digest mismatch: {}", list(.0))]
    DigestMismatch(Vec<PathBuf>),

    #[error(transparent)]
    Runtime(#[from] negotiated::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn list(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::MissingData(_) => exit::MISSING_DATA,
            CliError::DigestMismatch(_) => exit::DIGEST_MISMATCH,
            CliError::Runtime(_) | CliError::Io { .. } => exit::RUNTIME,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
