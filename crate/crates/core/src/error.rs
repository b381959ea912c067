use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid pooling target {target:?} for input of spatial size {input:?}")]
    InvalidTarget {
        target: (usize, usize),
        input: (usize, usize),
    },

    #[error("value {0} is not recorded in this graph")]
    DetachedTensor(String),

    #[error("loss must have exactly one element, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph was built in inference mode and cannot be differentiated")]
    InferenceGraph,

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("missing configuration: {0}")]
    MissingConfig(String),

    #[error("invalid FLOP convention {0:?} (expected `mac` or `paper-cra-additive`)")]
    InvalidConvention(String),

    #[error("model contains no CRA modules")]
    EmptyTrace,

    #[error("corrupt dataset {}: {reason} (at byte offset {offset})", file.display())]
    CorruptDataset {
        file: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("training diverged: {0}")]
    DivergedTraining(String),

    #[error("corrupt tensor file: {0}")]
    CorruptTensorFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
