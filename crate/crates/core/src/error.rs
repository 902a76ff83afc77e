use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the pruning, similarity and analysis operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("cosine similarity of a zero-norm vector")]
    ZeroNormVector,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("contrastive loss needs at least one pair")]
    EmptyBatch,
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error("token index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("attention weights sum to {sum}, expected 1")]
    AttentionNotNormalized { sum: f64 },
    #[error("budget must be at least 1")]
    InvalidBudget,
    #[error("ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("strategy needs at least one text")]
    NoTexts,
    #[error("strategy {0} cannot be run by this operation")]
    WrongStrategy(&'static str),
    #[error("threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("histogram needs at least one bin")]
    BadBinCount,
    #[error("attention row {text} has {row} entries but {labels} labels")]
    LabelLengthMismatch {
        text: usize,
        row: usize,
        labels: usize,
    },
    #[error("vector has zero variance")]
    ZeroVariance,
    #[error("text sequence is empty")]
    EmptyTextSequence,
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

/// A dump that breaks one of its structural invariants.
///
/// Every malformed dump maps to exactly one of these.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValidationError {
    #[error("unsupported dump format version {0}")]
    UnsupportedVersion(u32),
    #[error("shape mismatch for {array}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        array: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value in {array} at flat index {index}")]
    NonFiniteValue { array: String, index: usize },
    #[error("negative attention in {array} at flat index {index}")]
    NegativeAttention { array: String, index: usize },
    #[error("attention row {array} sums to {sum}")]
    RowNotNormalized { array: String, sum: f64 },
    #[error("mask value in {array} at flat index {index} outside [0, 1]")]
    MaskOutOfRange { array: String, index: usize },
    #[error("token count {tokens} is not grid side {grid} squared")]
    GridMismatch { tokens: usize, grid: usize },
    #[error("unknown text label code {code} in {array}")]
    InvalidLabel { array: String, code: u8 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
