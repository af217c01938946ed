use std::path::PathBuf;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus is not valid UTF-8 (first bad byte at offset {0})")]
    InvalidUtf8(usize),
    #[error("invalid split fractions: {0}")]
    InvalidSplit(String),
    #[error("corpus too small: {split} split has {len} tokens, need at least {needed}")]
    CorpusTooSmall {
        split: &'static str,
        len: usize,
        needed: usize,
    },
    #[error("invalid context length {0} (must be >= 2)")]
    InvalidContextLength(usize),
    #[error("invalid batch size {0}")]
    InvalidBatchSize(usize),

    #[error("embedding at position {0} has zero norm")]
    DegenerateEmbedding(usize),
    #[error("need at least {needed} embeddings, got {got}")]
    TooFewEmbeddings { needed: usize, got: usize },
    #[error("invalid boundary policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("window of length {len} exceeds context length {max}")]
    WindowTooLong { len: usize, max: usize },
    #[error("token id {id} at position {pos} is outside vocabulary of size {vocab}")]
    InvalidToken { id: u32, pos: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: attention covers {attn} positions, partition covers {partition}")]
    LengthMismatch { attn: usize, partition: usize },
    #[error("position {pos} out of range for length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("invalid finite-difference epsilon {0} (must lie in [1e-5, 1e-2])")]
    InvalidEpsilon(f64),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("coefficient of variation undefined for zero mean")]
    ZeroMean,
    #[error("paired differences have zero variance; t statistic undefined")]
    DegenerateDifferences,
    #[error("within-group variance is zero; F statistic undefined")]
    DegenerateWithinVariance,
    #[error("sample sizes differ: {0} vs {1}")]
    UnequalSamples(usize, usize),
    #[error("p-value {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u8, expected: u8 },
    #[error("incomplete experiment result: {0}")]
    IncompleteResult(String),
    #[error("invalid experiment matrix: {0}")]
    InvalidMatrix(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
