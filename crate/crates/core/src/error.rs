//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} requires {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got {numel} elements")]
    LossNotScalar { numel: usize },

    #[error("loss tensor is not attached to the active tape")]
    LossDetached,

    #[error("step {t} out of range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },

    #[error("signal length mismatch: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },

    #[error("class label {label} out of range 0..{n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("schedule infeasible: {reason}")]
    InfeasibleSchedule { reason: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("zero-power signal: {0}")]
    ZeroPower(&'static str),

    #[error("non-finite loss at step {step}: diff={diff_loss}, nc={nc_loss}")]
    NonFiniteLoss {
        step: usize,
        diff_loss: f64,
        nc_loss: f64,
    },

    #[error("training diverged at step {step}: loss {loss} exceeds {limit}")]
    Diverged { step: usize, loss: f64, limit: f64 },

    #[error("non-finite state during enhancement at step {t}")]
    NonFiniteState { t: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
