use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tensor shape {shape:?} holds {expected} elements but {actual} values were given")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor shape {0:?} has a zero extent")]
    EmptyExtent(Vec<usize>),
    #[error("non-finite value {value} at flat index {index}")]
    NonFiniteInput { index: usize, value: f64 },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected} parent(s), got {actual}")]
    Arity {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFiniteValue { node: usize, op: &'static str },
    #[error("backward through node {node} ({op}) produced a non-finite gradient")]
    NonFiniteGradient { node: usize, op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parameter and gradient sets differ at key {0}")]
    KeyMismatch(String),
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("insufficient data: {what} requires {required}, only {available} available")]
    Insufficient {
        what: &'static str,
        required: usize,
        available: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("input dimension {actual} does not match model input dimension {expected}")]
    InputDim { expected: usize, actual: usize },
    #[error("model has no expansion branch; use forward_base")]
    NoBranch,
    #[error("model has no frozen snapshot (still in the base session)")]
    NoSnapshot,
    #[error("session {0} was already expanded")]
    AlreadyExpanded(usize),
    #[error("indicator of branch {branch} is not in learnable-s mode")]
    NotLearnable { branch: usize },
    #[error("loss part {part} is not used by mode {mode}")]
    InconsistentParts {
        part: &'static str,
        mode: &'static str,
    },
    #[error("function evaluation at perturbed point {index} is not finite")]
    NonFiniteEvaluation { index: usize },
    #[error("step too large for the first-order regime: residual is {ratio:.3} of the measured change; use smaller steps")]
    StepTooLarge { ratio: f64 },
    #[error("no probe set: drift needs the session-0 probe features")]
    MissingProbe,
}

pub type Result<T> = core::result::Result<T, Error>;
