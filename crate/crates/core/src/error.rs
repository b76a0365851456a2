use thiserror::Error;

/// Errors raised by the search-space, controller, baseline and surrogate code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("search space size C({n}, {k}) overflows u64")]
    CountOverflow { n: u64, k: u64 },

    #[error("search space has {size} configurations, above the enumeration cap of {cap}; use sampled mode")]
    EnumerationCap { size: u64, cap: u64 },

    #[error("invalid pooling configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid pooling positions: {0}")]
    InvalidPositions(String),

    #[error("cannot parse configuration {text:?}: {reason}")]
    ConfigSyntax { text: String, reason: String },

    #[error("{name} index {index} out of range (len {len})")]
    IndexOutOfRange {
        name: &'static str,
        index: usize,
        len: usize,
    },

    #[error("accuracy {0} outside [0, 1]")]
    AccuracyRange(f64),

    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),

    #[error("joint distribution entry ({row}, {col}) is {value}, expected > 0")]
    NonPositiveEntry { row: usize, col: usize, value: f64 },

    #[error("IPF did not converge in {iters} iterations (KL = {kl:e})")]
    IpfNotConverged { iters: usize, kl: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("evaluation of configuration {config}, model {model} failed: {reason}")]
    Evaluation {
        config: usize,
        model: usize,
        reason: String,
    },

    #[error("malformed search tree: {0}")]
    MalformedTree(String),

    #[error("rank correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("benchmark table: {0}")]
    Benchmark(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
