use alloc::string::String;

use crate::tensor::Shape;

/// Errors raised by tensor primitives, model assembly, and graph analysis.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("invalid shape {0}: every dimension must be at least 1")]
    InvalidShape(Shape),
    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("{op}: channel/group mismatch ({detail})")]
    ChannelMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),
    #[error("local distance k={k} out of range for a {h}x{w} grid")]
    LocalDistance { k: usize, h: usize, w: usize },
    #[error("negative distance {0} passed to the gate")]
    NegativeDistance(f64),
    #[error("effective temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("reference pixel ({row}, {col}) outside a {h}x{w} grid")]
    OutOfBounds {
        row: usize,
        col: usize,
        h: usize,
        w: usize,
    },
    #[error("threshold tau={0} outside (0, 1]")]
    Threshold(f64),
    #[error("k_nn={k} out of range for {n} nodes")]
    NeighborCount { k: usize, n: usize },
    #[error("eigensolver did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("graph needs at least two nodes for a spectral gap, got {0}")]
    TooFewNodes(usize),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input {h}x{w} too small: {reason}")]
    InputTooSmall {
        h: usize,
        w: usize,
        reason: &'static str,
    },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = core::result::Result<T, Error>;
