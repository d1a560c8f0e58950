use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core and the training procedures built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,
    #[error("shape {shape:?} does not match {len} values")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("incompatible shapes for {op}: {left:?} vs {right:?}")]
    IncompatibleShapes {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unsupported primitive in backward pass: {0}")]
    UnsupportedPrimitive(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("flat vector has length {got}, expected {expected}")]
    FlatLength { expected: usize, got: usize },
    #[error("objective is not finite at coordinate {coordinate}")]
    NonFiniteObjective { coordinate: usize },
    #[error("step size must be positive")]
    NonPositiveStep,
    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("context of length {len} exceeds the model limit {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("invalid sequence: {0}")]
    InvalidSequence(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("all positions are excluded from the loss")]
    NoIncludedPositions,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("greedy handled by caller")]
    GreedyHandledByCaller,
    #[error("loss diverged at step {step}")]
    Divergence { step: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
