//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("path not found: {0}")]
    NotFound(PathBuf),
    #[error("no decodable images in dataset")]
    EmptyDataset,
    #[error("cannot split dataset: {0}")]
    SplitError(String),
    #[error("invalid configuration: {0}")]
    ConfigError(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("metric error: {0}")]
    MetricError(String),
    #[error("reference image has no energy above the cutoff radius")]
    DegenerateReference,
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("invalid edit spec: {0}")]
    SpecError(String),
    #[error("report error: {0}")]
    ReportError(String),
    #[error("checkpoint checksum mismatch or malformed file")]
    ChecksumError,
    #[error("unsupported checkpoint format version {0}")]
    VersionError(u32),
    #[error("io error: {0}")]
    IoError(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
