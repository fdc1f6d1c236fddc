//! Sparse adversarial perturbations for video sequence classifiers.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), a
//! family of toy CNN+RNN threat models selectable by name ([`models`]),
//! the perturbation optimizer with interchangeable norms ([`attack`]),
//! evaluation metrics ([`metrics`]), a seeded synthetic video dataset
//! ([`data`]) and an experiment harness with a CLI ([`harness`]).

pub mod attack;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod tensor;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("matmul inner extents differ: {0} vs {1}")]
    InnerDimMismatch(usize, usize),
    #[error("{what} expects rank {expected}, got rank {found}")]
    RankMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("tensor rank {0} exceeds the supported maximum of 4")]
    RankTooHigh(usize),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("division by zero in elementwise div (set allow_div_by_zero to pass Inf through)")]
    DivisionByZero,
    #[error("backward root must hold a single element, got {0}")]
    NonScalarRoot(usize),
    #[error("computation tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("operands were recorded on different tapes")]
    TapeMismatch,
    #[error("bad magic bytes, not a VTEN file")]
    BadMagic,
    #[error("unsupported VTEN version {0} (expected 1)")]
    UnsupportedVersion(u8),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("extent overflow: {0:?} does not fit in memory bounds")]
    ExtentOverflow(Vec<u32>),
    #[error("unknown temporal head {0:?} (known: {1})")]
    UnknownHead(String, String),
    #[error("unknown perturbation norm {0:?} (known: {1})")]
    UnknownNorm(String, String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("video is misclassified before the attack (predicted {predicted}, label {label})")]
    MisclassifiedInput { predicted: usize, label: usize },
    #[error("temporal mask leaves no frame to perturb (all bits zero)")]
    MaskAllZero,
    #[error("target label {0} equals the true label")]
    TargetEqualsLabel(usize),
    #[error("videos in the batch have heterogeneous shapes: {0:?} vs {1:?}")]
    HeterogeneousShapes(Vec<usize>, Vec<usize>),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("manifest line {line} is malformed: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
