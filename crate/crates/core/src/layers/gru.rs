use rand::Rng;

use crate::autodiff::{AutodiffError, Bound, ParamId, ParamSet, Tape, Var};
use crate::scalar::Scalar;

use super::uniform_init;

/// Gated recurrent unit.
///
/// Update, reset and candidate input weights are fused column-wise into one
/// `[input, 3·hidden]` matrix (order z, r, h̃) so a whole sequence can be
/// projected with a single matmul; the hidden-side weights are split into
/// the gate part `[hidden, 2·hidden]` and the candidate part, which acts on
/// `r ⊙ h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: ParamId,
    pub u_gates: ParamId,
    pub u_cand: ParamId,
    pub b: ParamId,
}

impl GruCell {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let h = hidden_dim;
        let w = ps.add(format!("{name}.w"), uniform_init(rng, &[input_dim, 3 * h], input_dim));
        let u_gates = ps.add(format!("{name}.u_gates"), uniform_init(rng, &[h, 2 * h], h));
        let u_cand = ps.add(format!("{name}.u_cand"), uniform_init(rng, &[h, h], h));
        let b = ps.add(format!("{name}.b"), uniform_init(rng, &[3 * h], h));
        let cell = Self {
            input_dim,
            hidden_dim,
            w,
            u_gates,
            u_cand,
            b,
        };
        let counted: usize = [w, u_gates, u_cand, b].iter().map(|&id| ps.get(id).len()).sum();
        assert_eq!(counted, Self::param_count(input_dim, hidden_dim));
        cell
    }

    /// `3·hidden·(input + hidden + 1)`.
    pub fn param_count(input_dim: usize, hidden_dim: usize) -> usize {
        3 * hidden_dim * (input_dim + hidden_dim + 1)
    }

    /// Input-side pre-activations for every step: `[T, input] → [T, 3·hidden]`.
    pub fn project<S: Scalar>(&self, tape: &mut Tape<S>, bd: &Bound, xs: Var) -> Result<Var, AutodiffError> {
        let shape = tape.shape(xs);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(AutodiffError::ShapeMismatch {
                op: "gru_step",
                shapes: vec![shape.to_vec(), vec![self.input_dim, self.hidden_dim]],
            });
        }
        let y = tape.matmul(xs, bd[self.w])?;
        tape.add(y, bd[self.b])
    }

    /// One update from a projected input row `[1, 3·hidden]`.
    pub fn step_projected<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bd: &Bound,
        xw: Var,
        h_prev: Var,
    ) -> Result<Var, AutodiffError> {
        let h = self.hidden_dim;
        if tape.shape(h_prev) != [1, h] {
            return Err(AutodiffError::ShapeMismatch {
                op: "gru_step",
                shapes: vec![tape.shape(h_prev).to_vec(), vec![1, h]],
            });
        }
        let x_gates = tape.slice(xw, 1, 0, 2 * h)?;
        let x_cand = tape.slice(xw, 1, 2 * h, h)?;
        let h_gates = tape.matmul(h_prev, bd[self.u_gates])?;
        let pre = tape.add(x_gates, h_gates)?;
        let gates = tape.sigmoid(pre)?;
        let z = tape.slice(gates, 1, 0, h)?;
        let r = tape.slice(gates, 1, h, h)?;
        let rh = tape.mul(r, h_prev)?;
        let h_cand = tape.matmul(rh, bd[self.u_cand])?;
        let pre_c = tape.add(x_cand, h_cand)?;
        let cand = tape.tanh(pre_c)?;
        // (1 − z)⊙h + z⊙h̃ = h + z⊙(h̃ − h)
        let diff = tape.sub(cand, h_prev)?;
        let upd = tape.mul(z, diff)?;
        tape.add(h_prev, upd)
    }

    /// `z=σ(W_z x+U_z h+b_z); r=σ(W_r x+U_r h+b_r); h̃=tanh(W_h x+U_h(r⊙h)+b_h); h'=(1−z)⊙h+z⊙h̃`.
    pub fn step<S: Scalar>(&self, tape: &mut Tape<S>, bd: &Bound, x: Var, h_prev: Var) -> Result<Var, AutodiffError> {
        let xw = self.project(tape, bd, x)?;
        self.step_projected(tape, bd, xw, h_prev)
    }
}
