use crate::scalar::Scalar;

use super::params::ParamSet;
use super::tensor::Tensor;
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rule plus its per-parameter state.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    kind: OptimizerKind,
    learning_rate: S,
    first_moment: Vec<Vec<S>>,
    second_moment: Vec<Vec<S>>,
    step_count: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate: S::lit(learning_rate),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Adam moment buffers (empty before the first Adam step).
    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Applies one update to `params` and zeroes their gradients.
    pub fn step(&mut self, params: &mut [Tensor<S>]) -> Result<(), AutodiffError> {
        for (i, p) in params.iter().enumerate() {
            let g = p.grad().ok_or(AutodiffError::MissingGrad { index: i })?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFiniteGrad { index: i });
            }
        }
        if self.kind == OptimizerKind::Adam && self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.kind == OptimizerKind::Adam
            && (self.first_moment.len() != params.len()
                || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()))
        {
            return Err(AutodiffError::OptimizerLayout);
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let (values, grad) = p.values_and_grad_mut();
                    let grad = grad.expect("checked above");
                    for (v, g) in values.iter_mut().zip(grad.iter_mut()) {
                        *v -= lr * *g;
                        *g = S::zero();
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2), S::lit(ADAM_EPS));
                let t = self.step_count as i32;
                let c1 = S::one() - b1.powi(t);
                let c2 = S::one() - b2.powi(t);
                for ((p, m), v) in params
                    .iter_mut()
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    let (values, grad) = p.values_and_grad_mut();
                    let grad = grad.expect("checked above");
                    for (((x, g), mi), vi) in values.iter_mut().zip(grad.iter_mut()).zip(m).zip(v) {
                        *mi = b1 * *mi + (S::one() - b1) * *g;
                        *vi = b2 * *vi + (S::one() - b2) * *g * *g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                        *g = S::zero();
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step_set(&mut self, set: &mut ParamSet<S>) -> Result<(), AutodiffError> {
        self.step(set.tensors_mut())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut [Tensor<S>], max_norm: S) -> S {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<S>()
        .sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= f);
            }
        }
    }
    norm
}
