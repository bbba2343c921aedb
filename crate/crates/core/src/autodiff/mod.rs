//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are created with
//! [`Tape::param`] (trainable) or [`Tape::constant`]; every op on a [`Var`]
//! appends a node, and [`Tape::backward`] walks the nodes in reverse order.
//!
//! Binary ops broadcast only over leading dimensions: the smaller operand's
//! shape must be a suffix of the larger one's (a rank-0 tensor is a suffix of
//! everything).

mod adam;
mod gradcheck;
mod tape;
mod tensor;
pub mod tsr;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use tape::{concat, Gradients, Tape, Var, EXP_CLAMP};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: input {value} outside domain (must be positive)")]
    Domain { op: &'static str, value: f64 },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("slice {start}..{end} out of range for axis of size {size}")]
    Slice { start: usize, end: usize, size: usize },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("parameter/gradient/state count mismatch: {0}")]
    Count(String),
}
