use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("referential integrity: {0}")]
    Integrity(String),

    #[error("node {node} out of range for graph with {len} nodes")]
    NodeOutOfRange { node: usize, len: usize },

    #[error("class {class} has {have} labeled nodes, task needs {need}")]
    InsufficientClass { class: usize, have: usize, need: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (batch seed {seed}, stream {stream})")]
    NonFiniteLoss { step: u64, seed: u64, stream: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Autograd(#[from] autograd::AutogradError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::File { path, source }
    }

    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InsufficientClass { .. }
                | Error::Parse { .. }
                | Error::Integrity(_)
                | Error::NodeOutOfRange { .. }
        ) || matches!(self, Error::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
