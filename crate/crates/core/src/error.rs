use thiserror::Error;

/// Errors raised by the simulator and analysis routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A parameter is outside its admissible range.
    #[error("invalid parameter `{field}` = {value}: {reason}")]
    InvalidParameter {
        field: &'static str,
        value: String,
        reason: String,
    },

    /// A step index is outside the domain of a schedule or trajectory.
    #[error("step {step} out of range: {reason}")]
    StepOutOfRange { step: u64, reason: String },

    /// The moment recursion produced a non-finite value.
    #[error("divergence at step {step} (lr = {lr:e}): {detail}")]
    Divergence { step: u64, lr: f64, detail: String },

    /// An input collection was empty or malformed.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn param(field: &'static str, value: impl ToString, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            value: value.to_string(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by numerical blow-up rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
