use rand::Rng;

use crate::autodiff::{AutodiffError, Bound, ParamId, ParamSet, Tape, Var};
use crate::scalar::Scalar;

use super::uniform_init;

/// Forget-gate bias at initialization.
pub const LSTM_FORGET_BIAS: f64 = 1.0;

/// Long short-term memory cell; gate columns ordered input, forget,
/// candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl LstmCell {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let h = hidden_dim;
        let w = ps.add(format!("{name}.w"), uniform_init(rng, &[input_dim, 4 * h], input_dim));
        let u = ps.add(format!("{name}.u"), uniform_init(rng, &[h, 4 * h], h));
        let mut bias = uniform_init::<S, _>(rng, &[4 * h], h);
        bias.values_mut()[h..2 * h].iter_mut().for_each(|v| *v = S::lit(LSTM_FORGET_BIAS));
        let b = ps.add(format!("{name}.b"), bias);
        let counted: usize = [w, u, b].iter().map(|&id| ps.get(id).len()).sum();
        assert_eq!(counted, Self::param_count(input_dim, hidden_dim));
        Self {
            input_dim,
            hidden_dim,
            w,
            u,
            b,
        }
    }

    /// `4·hidden·(input + hidden + 1)`.
    pub fn param_count(input_dim: usize, hidden_dim: usize) -> usize {
        4 * hidden_dim * (input_dim + hidden_dim + 1)
    }

    /// `[T, input] → [T, 4·hidden]`.
    pub fn project<S: Scalar>(&self, tape: &mut Tape<S>, bd: &Bound, xs: Var) -> Result<Var, AutodiffError> {
        let shape = tape.shape(xs);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(AutodiffError::ShapeMismatch {
                op: "lstm_step",
                shapes: vec![shape.to_vec(), vec![self.input_dim, self.hidden_dim]],
            });
        }
        let y = tape.matmul(xs, bd[self.w])?;
        tape.add(y, bd[self.b])
    }

    pub fn step_projected<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bd: &Bound,
        xw: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var), AutodiffError> {
        let h = self.hidden_dim;
        for v in [h_prev, c_prev] {
            if tape.shape(v) != [1, h] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "lstm_step",
                    shapes: vec![tape.shape(v).to_vec(), vec![1, h]],
                });
            }
        }
        let hu = tape.matmul(h_prev, bd[self.u])?;
        let pre = tape.add(xw, hu)?;
        let act = tape.sigmoid(pre)?;
        let i = tape.slice(act, 1, 0, h)?;
        let f = tape.slice(act, 1, h, h)?;
        let o = tape.slice(act, 1, 3 * h, h)?;
        let g_pre = tape.slice(pre, 1, 2 * h, h)?;
        let g = tape.tanh(g_pre)?;
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c))
    }

    /// One update from a raw input row `[1, input]`; returns `(h_t, c_t)`.
    pub fn step<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bd: &Bound,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var), AutodiffError> {
        let xw = self.project(tape, bd, x)?;
        self.step_projected(tape, bd, xw, h_prev, c_prev)
    }
}
