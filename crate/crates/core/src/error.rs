use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} is not on the tape")]
    UnknownNode(usize),
    #[error("parameter `{0}` not found")]
    UnknownParameter(String),
    #[error("non-finite function value at probe point ({name}[{index}])")]
    NonFiniteProbe { name: String, index: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("input of length {len} too short, need at least {min}")]
    InputTooShort { len: usize, min: usize },
    #[error("every attention position is masked")]
    AllMasked,
    #[error("count mismatch: {what} ({left} vs {right})")]
    CountMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("reference set {0} is empty")]
    EmptyReferenceSet(usize),
    #[error("no models given")]
    EmptyModelList,
    #[error("non-finite loss at step {step}")]
    Divergence { step: u64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
}

pub type Result<T> = core::result::Result<T, Error>;
