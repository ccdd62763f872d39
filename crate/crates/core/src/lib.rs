//! Dialog-history embeddings (h-vectors) for end-to-end signal-to-concept
//! spoken language understanding.
//!
//! The crate is generic over the floating point type ([`Scalar`]); the
//! aliases below fix it to `f64`, which is what the training pipeline and
//! the checkpoint format use.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod corpus;
pub mod ctc;
pub mod eval;
pub mod history;
pub mod layers;
pub mod train;
pub mod scalar;
pub mod slu;

pub use scalar::Scalar;

/// Scalar type used by the concrete aliases.
pub type Real = f64;

pub type Tensor = autodiff::Tensor<Real>;
pub type Tape = autodiff::Tape<Real>;
pub type ParamSet = autodiff::ParamSet<Real>;
pub type OptimizerState = autodiff::OptimizerState<Real>;
