//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Parameters
//! live in a [`ParamSet`] outside the tape; [`ParamSet::bind`] copies them in
//! as differentiable leaves and [`ParamSet::accumulate_grads`] moves the
//! resulting gradients back out after [`Tape::backward`].

mod conv;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use conv::{out_dim, ConvGeometry};
pub use optim::{clip_grad_norm, OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{Primitive, Tape, Var, RELU_CLIP};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("shape {shape:?} does not describe {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: String,
        expected: usize,
        got: usize,
    },
    #[error("conv2d: kernel {kernel:?} larger than input {input:?} padded by {padding:?}")]
    KernelTooLarge {
        input: (usize, usize),
        kernel: (usize, usize),
        padding: (usize, usize),
    },
    #[error("loss must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("loss does not depend on any differentiable input")]
    LossNotReachable,
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },
    #[error("parameter {index} has a non-finite gradient")]
    NonFiniteGrad { index: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("optimizer state does not match the parameter layout")]
    OptimizerLayout,
}
