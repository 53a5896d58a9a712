use alloc::string::String;

/// Errors raised by the core toolkit.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("patch extent {extent} on axis {axis} is not divisible by the cumulative stride {stride}")]
    IndivisiblePatch { axis: usize, extent: usize, stride: usize },

    #[error("empty {0} pool")]
    EmptyPool(&'static str),

    #[error("k = {k} folds requested for only {n} ids")]
    TooFewIds { k: usize, n: usize },

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { step: u64, term: &'static str },

    #[error("sample {0} carries no label but the run is fully supervised")]
    MissingLabel(String),

    #[error("spacing is required for {0}")]
    MissingSpacing(&'static str),

    #[error("training already reached its step budget ({0})")]
    Finished(u64),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl core::fmt::Debug, actual: impl core::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        expected: alloc::format!("{expected:?}"),
        actual: alloc::format!("{actual:?}"),
    }
}
