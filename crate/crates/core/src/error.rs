use thiserror::Error;

/// Errors raised by the laboratory. Failures of verification properties are
/// results, not errors, and never show up here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("enumeration cap exceeded: |Z x Y| = {size} > cap {cap}")]
    CapExceeded { size: u64, cap: u64 },

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("event is empty for prompt {prompt}")]
    EmptyEvent { prompt: usize },

    #[error("event has zero mass for prompt {prompt}")]
    ZeroMassEvent { prompt: usize },

    #[error("index out of space: {what} {index} (size {size})")]
    OutOfSpace {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("feature maps differ: {0}")]
    FeatureMismatch(String),

    #[error("variational distribution is not normalized (sum = {sum})")]
    UnnormalizedVariational { sum: f64 },

    #[error("horizon violation: {0}")]
    HorizonViolation(String),

    #[error("every trajectory is clamped; event unreachable for prompt {prompt}")]
    UnreachableEvent { prompt: usize },

    #[error("clamped trajectory received probability {prob:e}")]
    ClampLeak { prob: f64 },

    #[error("policy-gradient objective decreased for {count} consecutive evaluations")]
    Divergence { count: usize },

    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("surrogate decreased after {halvings} step halvings")]
    SurrogateDecrease { halvings: usize },

    #[error("closed-form M-step requires tabular features, got {0}")]
    ClosedFormRequiresTabular(String),

    #[error("evaluator must be a binary verifier for {0}")]
    RequiresBinaryVerifier(&'static str),

    #[error("evaluator must be a soft reward for {0}")]
    RequiresSoftReward(&'static str),

    #[error("tag {tag} was never seen for prompt {prompt}")]
    UnseenTag { prompt: usize, tag: usize },

    #[error("preference pair has zero probability under {which} model")]
    ZeroProbabilityPair { which: &'static str },

    #[error("mismatched tasks: {0}")]
    MismatchedTask(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("corrupt record {path}: {reason}")]
    CorruptRecord { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
