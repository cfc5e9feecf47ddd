//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch { context: String, expected: String, got: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("class {0} has no samples available")]
    EmptyClass(usize),

    #[error("label mapping requires n_hijack >= n_original (got {n_original} -> {n_hijack})")]
    MappingInfeasible { n_original: usize, n_hijack: usize },

    #[error("resolution {res} not divisible by 2^{depth}; maximum legal depth is {max_depth}")]
    IndivisibleResolution { res: usize, depth: usize, max_depth: usize },

    #[error("feature extractor must be frozen")]
    ExtractorNotFrozen,

    #[error("non-finite loss at {context} {index}")]
    NonFiniteLoss { context: &'static str, index: usize },

    #[error("degenerate expert segment: snapshot difference has zero norm")]
    DegenerateSegment,

    #[error("insufficient patches for class {class}: need {needed}, have {available}")]
    InsufficientPatches { class: usize, needed: usize, available: usize },

    #[error("unsupported architecture '{0}' in this build")]
    UnsupportedArch(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("content hash mismatch for {field}: expected {expected}, got {got}")]
    HashMismatch { field: String, expected: String, got: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("privacy budget exhausted: spent epsilon {spent:.4} exceeds {budget:.4} at step {step}")]
    PrivacyExhausted { spent: f64, budget: f64, step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),
}
