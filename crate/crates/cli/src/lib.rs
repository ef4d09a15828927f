//! Pipeline subcommands behind the `deltafix` binary.

pub mod commands;
pub mod config;
pub mod summary;
pub mod workdir;

use std::path::PathBuf;

use thiserror::Error;

pub use commands::{cmd_ablate, cmd_build, cmd_evaluate, cmd_mine, cmd_predict, cmd_train, PredictArgs};
pub use config::{Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) | CliError::Io { .. } => EXIT_DATA,
            CliError::Training(_) => EXIT_TRAINING,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub(crate) fn data(e: impl std::fmt::Display) -> CliError {
        CliError::Data(e.to_string())
    }
}
