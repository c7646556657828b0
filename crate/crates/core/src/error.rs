use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("no usable capture files in {dir}")]
    EmptyRegistry { dir: PathBuf, skipped: Vec<(PathBuf, String)> },

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("unsupported audio format: {0}")]
    Format(String),

    #[error("clip is empty")]
    EmptyClip,

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("batch spec error: {0}")]
    BatchSpec(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("target signal has zero energy")]
    DegenerateTarget,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("need at least two classes, got {0}")]
    DegenerateLabels(usize),

    #[error("device index {index} out of range for {count} devices")]
    DeviceIndex { index: usize, count: usize },

    #[error("cache error: {0}")]
    Cache(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
