use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or wiring problem inside a computation graph.
    #[error("structural error at node {node} ({op}): {msg}")]
    Structural { node: usize, op: &'static str, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged in stage `{stage}` at iteration {iteration}: {msg}")]
    Training {
        stage: String,
        iteration: usize,
        msg: String,
    },

    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
