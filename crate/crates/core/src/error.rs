use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: isize, rank: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor belongs to a different tape")]
    ForeignTensor,

    #[error("index {index} out of range (limit {limit}) in {context}")]
    IndexOutOfRange {
        index: usize,
        limit: usize,
        context: &'static str,
    },

    #[error("length mismatch: expected {expected}, got {actual} ({context})")]
    LengthMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("attack diverged at iteration {0}")]
    Diverged(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
