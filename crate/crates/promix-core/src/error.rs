use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Error type for the data-facing half of the crate: configuration
/// validation, task generation, training control flow.
///
/// Graph-construction mistakes (shape mismatches, bad axes) are programmer
/// errors and panic with a diagnostic instead; see `tape`.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// One or more configuration fields failed validation. The message
    /// names every offending field.
    InvalidConfig(String),
    /// Task generation could not satisfy its constraints (e.g. not enough
    /// distinct sequences for disjoint splits).
    TaskGeneration(String),
    /// A loss became non-finite during training. Carries the step at which
    /// divergence was detected and the finite per-task loss history up to
    /// that step (outer index: suite position), so callers can persist the
    /// partial record.
    Diverged {
        step: usize,
        message: String,
        partial_losses: Vec<Vec<f64>>,
    },
}

impl core::error::Error for CoreError {}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            CoreError::TaskGeneration(msg) => write!(f, "task generation failed: {msg}"),
            CoreError::Diverged { step, message, .. } => {
                write!(f, "training diverged at step {step}: {message}")
            }
        }
    }
}
