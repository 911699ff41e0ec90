use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HgclError>;

#[derive(Debug, Error)]
pub enum HgclError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0} contains no interactions")]
    EmptyDataset(PathBuf),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {what} {index} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("negative sampling failed: {0}")]
    Sampling(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("perplexity {target} unreachable for point {point} (achievable range {lo:.4}..{hi:.4})")]
    Perplexity {
        point: usize,
        target: f64,
        lo: f64,
        hi: f64,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("stage `{stage}` needs {artifact}; run `{run_first}` first")]
    MissingArtifact {
        stage: String,
        artifact: String,
        run_first: String,
    },
}

impl HgclError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HgclError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: &str, msg: impl Into<String>) -> Self {
        HgclError::Config {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}
