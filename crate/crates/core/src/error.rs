use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("k exceeds expert count (k = {k}, experts = {n})")]
    KExceedsExperts { k: usize, n: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("step {step} out of range 0..={steps}")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: usize, diagnostic: String },

    #[error("{0} does not divide {1}")]
    NotDivisible(usize, usize),

    #[error("ragged input: {0}")]
    Ragged(String),

    #[error("no savings: target unreached")]
    TargetUnreached,

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed metrics file {path}: {detail}")]
    Metrics { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
