//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already run on this tape")]
    TapeConsumed,
    #[error("degenerate output: {0}")]
    DegenerateOutput(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// Errors raised while building or normalizing skeleton graphs.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("joint index {index} out of range for {joints} joints")]
    JointOutOfRange { index: usize, joints: usize },
    #[error("self-loop on joint {0} is not a bone")]
    SelfLoop(usize),
    #[error("skeleton graph is disconnected: joint {0} unreachable from the rest")]
    Disconnected(usize),
    #[error("adjacency entry at ({row},{col}) is negative")]
    NegativeEntry { row: usize, col: usize },
    #[error("topology must have at least one joint")]
    Empty,
    #[error("topology json: {0}")]
    Json(String),
}

/// Errors raised by layer/network configuration validation.
#[derive(Debug, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

/// Errors raised by the checkpoint reader/writer.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic (expected \"STTR\")")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("tensor {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    Missing(String),
    #[error("checkpoint holds tensor {0} unknown to this model")]
    Unknown(String),
}

/// Errors raised by dataset files and the synthetic generator.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad sample magic (expected \"SKEL\")")]
    BadMagic,
    #[error("unsupported sample format version {0}")]
    Version(u32),
    #[error("sample file is truncated")]
    Truncated,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("unknown motion archetype \"{0}\"")]
    UnknownArchetype(String),
    #[error("sample has {found} joints, expected {expected}")]
    JointMismatch { expected: usize, found: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("matrix file: {0}")]
    Matrix(String),
}

/// Umbrella error for the higher-level network and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
}
