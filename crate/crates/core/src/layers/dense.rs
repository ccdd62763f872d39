use rand::Rng;

use crate::autodiff::{AutodiffError, Bound, ParamId, ParamSet, Tape, Var};
use crate::scalar::Scalar;

use super::uniform_init;

/// Affine map `x·W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Dense {
    pub input_dim: usize,
    pub output_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), uniform_init(rng, &[input_dim, output_dim], input_dim));
        let bias = ps.add(format!("{name}.bias"), uniform_init(rng, &[output_dim], input_dim));
        Self {
            input_dim,
            output_dim,
            weight,
            bias,
        }
    }

    pub fn param_count(input_dim: usize, output_dim: usize) -> usize {
        input_dim * output_dim + output_dim
    }

    /// `[n, input_dim] → [n, output_dim]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bd: &Bound, x: Var) -> Result<Var, AutodiffError> {
        let y = tape.matmul(x, bd[self.weight])?;
        tape.add(y, bd[self.bias])
    }
}

/// Trainable lookup table of word vectors.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub vocab: usize,
    pub dim: usize,
    pub table: ParamId,
}

impl Embedding {
    pub fn new<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<S>, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        // Unit-scale rows; fan-in of a lookup is 1.
        let table = ps.add(format!("{name}.table"), uniform_init(rng, &[vocab, dim], 1));
        Self { vocab, dim, table }
    }

    pub fn param_count(vocab: usize, dim: usize) -> usize {
        vocab * dim
    }

    /// `ids → [len, dim]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bd: &Bound, ids: &[usize]) -> Result<Var, AutodiffError> {
        if ids.is_empty() {
            return Err(AutodiffError::EmptySequence);
        }
        tape.gather_rows(bd[self.table], ids)
    }
}
