//! Dense `f64` arrays with tape-based reverse-mode differentiation.
//!
//! Every differentiable computation in the crate (network, skinning, splatting,
//! losses) is recorded on a step-scoped [`Tape`]. Values are immutable once
//! recorded and must stay finite; a non-finite result is reported as an error
//! naming the producing op.

mod array;
mod gradcheck;
mod ops;
mod tape;

pub use array::NdArray;
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use ops::{broadcast_shape, BinaryOp, ReduceOp, UnaryOp};
pub use tape::{set_gradient_fault, BackwardCtx, BackwardFn, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{op}: domain violation at index {index}")]
    Domain { op: &'static str, index: usize },
    #[error("division by zero at index {index}")]
    DivisionByZero { index: usize },
    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("variable is not recorded on this tape")]
    UnknownVar,
    #[error("reduction over an empty axis")]
    EmptyReduction,
    #[error("not differentiable at coordinate {index}: central differences {coarse} (h) vs {fine} (h/2)")]
    NotDifferentiable { index: usize, coarse: f64, fine: f64 },
    #[error("{0}")]
    Invalid(String),
}
