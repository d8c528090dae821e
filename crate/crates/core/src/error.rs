use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HceError>;

#[derive(Debug, Error)]
pub enum HceError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): expected x2 > x1 and y2 > y1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("degenerate RoI after stride division: span {span:e} below 1e-6")]
    DegenerateRoi { span: f64 },

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },

    #[error("category {category} out of range for {num_classes} classes")]
    CategoryOutOfRange { category: usize, num_classes: usize },

    #[error("target vector is not binary: element {index} = {value}")]
    NonBinaryTarget { index: usize, value: f64 },

    #[error("loss term {term} is not finite ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown image id {0}")]
    UnknownImage(u64),

    #[error("inference needs at least one of the feature-fusion or confidence-fusion branches")]
    NoBranchEnabled,

    #[error("split {split} in {dir} was written with config hash {existing}, refusing to overwrite with {requested}")]
    HashCollision {
        split: String,
        dir: PathBuf,
        existing: String,
        requested: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl HceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HceError::Io { path: path.into(), source }
    }

    pub fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        HceError::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
