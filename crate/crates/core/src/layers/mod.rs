//! Recurrent cells, bidirectional wrappers, dense layers and sequence-wise
//! batch normalization, all composed from tape primitives.
//!
//! Layers do not own their weights: each holds [`ParamId`]s into a
//! [`ParamSet`](crate::autodiff::ParamSet) and reads them through the
//! [`Bound`](crate::autodiff::Bound) handles of the current tape.

mod batchnorm;
mod dense;
mod gru;
mod lstm;
mod recurrent;

pub use batchnorm::{BatchNormMode, SeqBatchNorm, BN_EPS, BN_MOMENTUM};
pub use dense::{Dense, Embedding};
pub use gru::GruCell;
pub use lstm::{LstmCell, LSTM_FORGET_BIAS};
pub use recurrent::{BiRecurrentLayer, Cell, CellKind, SequenceOutput};

use rand::Rng;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn uniform_init<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| S::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), values).expect("finite init")
}
