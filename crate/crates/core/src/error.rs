use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid engine config: {0}")]
    InvalidEngineConfig(&'static str),
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("token id {0} outside vocabulary")]
    UnknownToken(u32),
    #[error("past position {past} overlaps new start position {start}")]
    PositionOverlap { past: u32, start: u32 },
    #[error("index {index} out of bounds for length {len}")]
    OutOfBounds { index: usize, len: usize },
    #[error("context columns overlap the clip's own columns")]
    OverlappingIndices,
    #[error("ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("empty score vector")]
    EmptyScores,
    #[error("max_steps must be at least 1")]
    ZeroSteps,
    #[error("clip length {got} does not match configured length {expected}")]
    ClipLength { expected: usize, got: usize },
    #[error("question given but question encoding is disabled")]
    QuestionNotEnabled,
    #[error("start layer {start} exceeds layer count {layers}")]
    StartLayer { start: usize, layers: usize },
    #[error("n_a must be at least 1")]
    ZeroRecall,
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("relevance vector of length {got} does not match bank of {expected} clips")]
    Misaligned { expected: usize, got: usize },
    #[error("need at least {needed} samples to fit {needed} layer weights, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("normal equations are singular")]
    Singular,
    #[error("no clips to encode")]
    NoClips,
    #[error("bank record {0} carries no clip index")]
    MissingIndex(usize),
    #[error("layer {0} not present in the index")]
    LayerMismatch(usize),
}
