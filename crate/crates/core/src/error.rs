use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples found under {0}")]
    NoSamples(PathBuf),

    #[error("unknown class directory {name:?} under {root} (expected normal, benign or malignant)")]
    UnknownClass { root: PathBuf, name: String },

    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),

    #[error("invalid fold request: {0}")]
    InvalidFolds(String),

    #[error("class {class} has {count} samples, fewer than k={k} required for stratified folds")]
    ClassTooSmall { class: String, count: usize, k: usize },

    #[error("fold {fold} out of range for k={k}")]
    FoldOutOfRange { fold: usize, k: usize },

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("sample sets differ between ensemble members; missing ids: {0:?}")]
    SampleMismatch(Vec<String>),

    #[error("ROC undefined: scores need at least one positive and one negative sample")]
    RocUndefined,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from input data rather than a training failure.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. })
    }
}
