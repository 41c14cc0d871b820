use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("layer id {id} out of range (network has {depth} weighted layers)")]
    LayerOutOfRange { id: usize, depth: usize },

    #[error("layer {id} cannot be tapped: {reason}")]
    NotTappable { id: usize, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("class {class} has no samples; cannot normalize relevance row")]
    EmptyClass { class: usize },

    #[error("k = {k} exceeds the {r} feature maps available at layer {layer}")]
    TooManyFeatures { k: usize, r: usize, layer: usize },

    #[error("classifier data contains a single class only ({positives} positives of {total})")]
    SingleClass { positives: usize, total: usize },

    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
