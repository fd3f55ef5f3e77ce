use alloc::string::String;

/// Errors produced anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("token id {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("target position {0} has no preceding context")]
    PositionZeroTarget(usize),
    #[error("target position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("empty target set")]
    EmptyTargets,
    #[error("layer {layer} out of range for model with {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("context overflow: prompt {prompt} + {max_new} new tokens exceeds max_seq {max_seq}")]
    ContextOverflow { prompt: usize, max_new: usize, max_seq: usize },
    #[error("vocabulary exhausted: need {needed} tokens, capacity {capacity}")]
    VocabularyExhausted { needed: usize, capacity: usize },
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("no key samples for covariance estimate")]
    NoSamples,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("matrix not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("zero denominator in rank-one update: {0:e}")]
    ZeroDenominator(f64),
    #[error("key matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },
    #[error("gram matrix is near singular (condition estimate {condition:e})")]
    NearSingular { condition: f64 },
    #[error("target-value solver failed after {iterations} iterations (loss {loss})")]
    SolverFailed { iterations: usize, loss: f64 },
    #[error("editor failed at layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
    #[error("edit step ending at t = {t} failed: {source}")]
    EditFailed {
        t: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
    #[error("invalid edit plan: {0}")]
    InvalidPlan(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("empty position class in saliency partition: {0}")]
    EmptyClass(&'static str),
    #[error("correlation undefined: zero variance input")]
    ZeroVariance,
}

pub type Result<T> = core::result::Result<T, Error>;
