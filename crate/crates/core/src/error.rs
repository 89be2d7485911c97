use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("data length {found} does not match shape element count {expected}")]
    DataLength { expected: usize, found: usize },
    #[error("tensor {name} is missing from the {side} checkpoint")]
    MissingTensor { name: String, side: &'static str },
    #[error("tensor name {0:?} matches no schema rule")]
    UnmatchedName(String),
    #[error("tensor name {name:?} matches several schema rules: {patterns:?}")]
    AmbiguousName { name: String, patterns: Vec<String> },
    #[error("invalid name pattern {pattern:?}: {reason}")]
    InvalidPattern { pattern: String, reason: String },
    #[error("layer {0} has no anchor (FFN/expert) tensors")]
    MissingAnchor(u32),
    #[error("reference mixer family {0} has zero occupation")]
    ZeroReferenceOccupation(&'static str),
    #[error("invalid value for {what}: {value}")]
    InvalidValue { what: &'static str, value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("token {token} is out of range for vocabulary size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("example {index}: {reason}")]
    InvalidExample { index: usize, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no salience entry for {kind} at layer {layer}")]
    MissingSalience { kind: String, layer: String },
    #[error("no projector for activation space {0:?}")]
    MissingProjector(String),
    #[error(
        "no captured activation for space {space:?} at example {example}, position {position}"
    )]
    MissingCapture {
        space: String,
        example: usize,
        position: usize,
    },
    #[error("salience tables cover different component/layer grids")]
    GridMismatch,
}
