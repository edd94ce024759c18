use std::path::PathBuf;

/// Errors raised by tensor operations, layers and the model graph.
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected} tensor, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("mask value {value} at index {index} is not binary")]
    NonBinaryMask { index: usize, value: f64 },
    #[error("{op}: no valid pixels")]
    EmptyValidSet { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph")]
    GraphConsumed,
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("nonzero depth {value} at unobserved pixel {index}")]
    DepthMaskDisagreement { index: usize, value: f64 },
    #[error("ground truth is {value} at valid pixel {index}; relative error needs gt > 0")]
    NonPositiveGroundTruth { index: usize, value: f64 },
}

/// Errors raised while parsing or writing files.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{}: {err}", path.display())]
    Io { path: PathBuf, err: std::io::Error },
    #[error("malformed header at byte {offset}: {msg}")]
    Header { offset: usize, msg: String },
    #[error("truncated payload: needed {needed} bytes at offset {offset}, found {found}")]
    Truncated { offset: usize, needed: usize, found: usize },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint record {record} ({name}) at byte {offset}: {msg}")]
    Record {
        record: usize,
        name: String,
        offset: usize,
        msg: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] Error),
}

impl FormatError {
    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        FormatError::Io { path: path.into(), err }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
