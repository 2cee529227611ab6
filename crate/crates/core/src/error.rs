use std::path::PathBuf;

/// Errors raised by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("capacity exceeded: {parts} parts do not fit into {p_max} slots")]
    Capacity { parts: usize, p_max: usize },

    #[error("dataset error in {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },

    #[error("dataset error for object `{object_id}`: {reason}")]
    Object { object_id: String, reason: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint tensor `{tensor}`: {reason}")]
    CheckpointTensor { tensor: String, reason: String },

    #[error("shape mismatch for tensor `{tensor}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage order violated: {0}")]
    StageOrder(String),

    #[error("training diverged in {stage} at epoch {epoch}, step {step}: non-finite {term}")]
    Divergence {
        stage: String,
        epoch: usize,
        step: usize,
        term: String,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
