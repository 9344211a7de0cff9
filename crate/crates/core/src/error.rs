use std::path::PathBuf;

/// Errors surfaced by corpus loading, configuration, checkpointing, and runs.
///
/// Contract violations inside the tensor engine (shape mismatches, backward
/// from a non-scalar, fully masked attention rows) are programmer errors and
/// panic with a message naming the offending operation instead.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus {path}: {message}")]
    Corpus { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("embeddings {path}: {message}")]
    Embeddings { path: PathBuf, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("training: {0}")]
    Train(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("output directory {path}: {message}")]
    OutDir { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn corpus(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Corpus { path: path.into(), message: message.into() }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Checkpoint { path: path.into(), message: message.into() }
    }
}
