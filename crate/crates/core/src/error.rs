use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report, grouped by the module that raises it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("unknown op kind `{0}`")]
    UnknownOpKind(String),

    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("mask contains values other than 0 and 1")]
    NonBinaryMask,

    #[error("cannot resize {from:?} to {to:?}: extents must divide exactly")]
    NonIntegerRatio { from: (usize, usize), to: (usize, usize) },

    #[error("region {0} is empty at feature resolution")]
    InvalidRegion(usize),

    #[error("no similarity term is computable for the sample")]
    AllRegionsInvalid,

    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("data missing: {0}")]
    DataMissing(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("scene {scene:?} is smaller than patch size {patch}")]
    SceneTooSmall { scene: (usize, usize), patch: usize },

    #[error("non-finite loss at step {step} (epoch {epoch}): {detail}")]
    NonFiniteLoss { step: usize, epoch: usize, detail: String },

    #[error("batch of {0} embeddings is too small, need at least 2")]
    BatchTooSmall(usize),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path:?}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
