use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("slot index {index} outside 1..={total}")]
    SlotOutOfRange { index: usize, total: usize },

    #[error("cannot build network: {0}")]
    Build(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("label {label} outside 0..{n_classes}")]
    InvalidLabel { label: usize, n_classes: usize },

    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("config not found: {0}")]
    ConfigNotFound(PathBuf),

    #[error("no history found in {0}")]
    NoHistory(PathBuf),

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
