use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed skeleton file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("{path} contains more than one body in frame {frame}")]
    MultiActorFile { path: PathBuf, frame: usize },

    #[error("sequence rejected by denoising: {0}")]
    Rejected(String),

    #[error("corpus cannot form any 2x2 actor/action grid under a shared camera")]
    NoValidPairs,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss term `{0}` required by this objective is missing")]
    MissingTerm(String),

    #[error("topology has no chain length for end-effector joint {0}")]
    MissingChainLength(usize),

    #[error("no training data available for stage {0}")]
    DataExhausted(String),

    #[error("training diverged in stage {stage} at step {step}: {term} is not finite")]
    Divergence {
        stage: String,
        step: u64,
        term: String,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),

    #[error("dummy pool is empty")]
    EmptyDummyPool,

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("label mismatch: {0}")]
    LabelMismatch(String),

    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no input files under {0}")]
    NoInputFiles(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
