use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library. Variants carry enough context to point at
/// the offending sequence, frame, or unroll layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("LSM depth must be >= 1, got {0}")]
    InvalidDepth(usize),

    #[error("sequence '{sequence}' has {length} frames, too short for depth {depth} (needs > depth)")]
    SequenceTooShort {
        sequence: String,
        length: usize,
        depth: usize,
    },

    #[error("cannot build a shuffle plan over an empty window pool")]
    EmptyPool,

    #[error("shuffle plan covers {plan} windows but {windows} were provided")]
    PlanMismatch { plan: usize, windows: usize },

    #[error("ingestion failed for sequence '{sequence}': {reason}")]
    Ingestion { sequence: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite values produced at unroll layer {layer}")]
    Divergence { layer: usize },

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("confusion matrix holds no counted pixels")]
    NoData,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
