//! Gaze-based group classification pipeline.
//!
//! The crate covers the full path from raw eye-tracking corpora to evaluation
//! reports: ingest and validation (`corpus`), signal cleanup (`preprocess`),
//! trial windowing (`segment`), bootstrap set construction (`sampler`),
//! synthetic cohort generation (`synth`), the two-branch convolutional
//! classifier (`nnet`), nested cross-validation (`harness`), resampling
//! statistics (`stats`) and model attribution (`attribute`).

pub mod attribute;
pub mod config;
pub mod corpus;
pub mod harness;
pub mod nnet;
pub mod preprocess;
pub mod sampler;
pub mod segment;
pub mod seed;
pub mod stats;
pub mod synth;

use std::path::PathBuf;

/// Crate-wide error type. Variants distinguish the failure domains that
/// callers branch on: file-level trouble, malformed rows, semantic
/// validation, configuration mistakes and numeric faults.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing input for participant {participant}: {path}")]
    MissingFile { participant: String, path: PathBuf },

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("validation failed:\n{}", issues.join("\n"))]
    Validation { issues: Vec<String> },

    #[error("config error: {0}")]
    Config(String),

    #[error("preprocess failure for {participant}: {message}")]
    Preprocess { participant: String, message: String },

    #[error("segmentation failure for trial {trial}: {message}")]
    Segment { trial: String, message: String },

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("model fault in {layer}: {message}")]
    Model { layer: String, message: String },

    #[error("fold plan error: {0}")]
    Plan(String),

    #[error("training run diverged at fold {fold} seed {seed}: {message}")]
    Diverged {
        fold: usize,
        seed: usize,
        message: String,
    },

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("artifact dependency missing: {0}")]
    Dependency(String),

    #[error("config hash mismatch for {artifact}: expected {expected}, found {found}")]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn validation(issue: impl Into<String>) -> Self {
        Error::Validation {
            issues: vec![issue.into()],
        }
    }

    pub fn validation_all(issues: Vec<String>) -> Self {
        Error::Validation { issues }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
