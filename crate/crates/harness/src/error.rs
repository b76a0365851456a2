use std::path::PathBuf;

use poolmix_cnn::CnnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("config file {path}: {reason}")]
    ConfigFile { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] poolmix::Error),

    #[error(transparent)]
    Cnn(#[from] CnnError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("CIFAR file {path}: {reason} (byte offset {offset})")]
    Cifar {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("dataset: {0}")]
    Data(String),

    #[error("run aborted at step {step}: {source}")]
    Aborted {
        step: u64,
        #[source]
        source: Box<HarnessError>,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
