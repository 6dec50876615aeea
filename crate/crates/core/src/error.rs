use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layer spec `{layer}`: {reason}")]
    InvalidLayer { layer: String, reason: String },

    #[error("invalid network spec `{network}`: {reason}")]
    InvalidNetwork { network: String, reason: String },

    #[error("layer `{layer}` expects {expected} input(s), got {got}")]
    Arity {
        layer: String,
        expected: String,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("invalid resolution {0}: must be a positive multiple of 16")]
    Resolution(usize),

    #[error("input values outside the normalized range [-1, 1] (found {0})")]
    Range(f64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("probability {0} outside [0, 1]")]
    Probability(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parameter error: {0}")]
    Params(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("feature disabled by ablation: {0}")]
    Ablated(&'static str),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing file for triplet `{id}`: {path}")]
    MissingFile { id: String, path: PathBuf },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image is too small: {0}")]
    TooSmall(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
