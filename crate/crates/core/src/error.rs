use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid maze dimensions {rows}x{cols}: both must be odd and at least 7")]
    MazeDimensions { rows: usize, cols: usize },

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("depth {depth} out of range for observation dimension {dim}")]
    DepthOutOfRange { depth: usize, dim: usize },

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    /// The observation has zero likelihood under every state carrying prior mass.
    #[error("belief inconsistent with observation (normalizer is {0})")]
    Inconsistent(f64),

    #[error("belief support is empty after applying floor {0}")]
    EmptySupport(f64),

    #[error("invalid AML parameters: {0}")]
    AmlParams(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("training worker failed: {0}")]
    Worker(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
