use crate::autodiff::{AutodiffError, Bound, ParamId, ParamSet, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Batch normalization whose statistics pool every (time, batch) position.
///
/// `gamma`/`beta` are trainable; the running statistics live in a separate
/// buffer set so the optimizer never touches them.
#[derive(Clone, Debug)]
pub struct SeqBatchNorm {
    pub feature_dim: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl SeqBatchNorm {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, buffers: &mut ParamSet<S>, name: &str, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            gamma: ps.add(format!("{name}.gamma"), Tensor::filled(&[feature_dim], S::one())),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[feature_dim])),
            running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[feature_dim])),
            running_var: buffers.add(format!("{name}.running_var"), Tensor::filled(&[feature_dim], S::one())),
        }
    }

    pub fn param_count(feature_dim: usize) -> usize {
        2 * feature_dim
    }

    /// Normalizes `xs` of shape `[time, batch, feat]` (or `[positions, feat]`).
    /// Train mode uses batch statistics and folds them into the running
    /// statistics with momentum [`BN_MOMENTUM`]; infer mode uses the running
    /// statistics and leaves `buffers` untouched.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bd: &Bound,
        buffers: &mut ParamSet<S>,
        xs: Var,
        mode: BatchNormMode,
    ) -> Result<Var, AutodiffError> {
        let shape = tape.shape(xs).to_vec();
        if shape.last() != Some(&self.feature_dim) || shape.len() < 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "seq_batchnorm",
                shapes: vec![shape, vec![self.feature_dim]],
            });
        }
        let positions = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = tape.reshape(xs, vec![positions, self.feature_dim])?;
        let normed = match mode {
            BatchNormMode::Train => {
                if positions < 2 {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "seq_batchnorm",
                        shapes: vec![shape],
                    });
                }
                let (y, mean, var) = tape.normalize_columns(flat, S::lit(BN_EPS))?;
                let m = S::lit(BN_MOMENTUM);
                let rm = buffers.get_mut(self.running_mean).values_mut();
                for (r, &b) in rm.iter_mut().zip(&mean) {
                    *r = m * *r + (S::one() - m) * b;
                }
                let rv = buffers.get_mut(self.running_var).values_mut();
                for (r, &b) in rv.iter_mut().zip(&var) {
                    *r = m * *r + (S::one() - m) * b;
                }
                y
            }
            BatchNormMode::Infer => {
                let mean = buffers.get(self.running_mean).values().to_vec();
                let inv: Vec<S> = buffers
                    .get(self.running_var)
                    .values()
                    .iter()
                    .map(|&v| S::one() / (v + S::lit(BN_EPS)).sqrt())
                    .collect();
                let mean = tape.constant_from(vec![self.feature_dim], mean)?;
                let inv = tape.constant_from(vec![self.feature_dim], inv)?;
                let centered = tape.sub(flat, mean)?;
                tape.mul(centered, inv)?
            }
        };
        let scaled = tape.mul(normed, bd[self.gamma])?;
        let shifted = tape.add(scaled, bd[self.beta])?;
        tape.reshape(shifted, shape)
    }
}
