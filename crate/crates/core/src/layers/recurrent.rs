use rand::Rng;

use crate::autodiff::{AutodiffError, Bound, ParamSet, Tape, Var};
use crate::scalar::Scalar;

use super::{GruCell, LstmCell};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Lstm,
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gru => "gru",
            Self::Lstm => "lstm",
        })
    }
}

impl std::str::FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gru" => Ok(Self::Gru),
            "lstm" => Ok(Self::Lstm),
            other => Err(format!("unknown cell kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Cell {
    Gru(GruCell),
    Lstm(LstmCell),
}

/// States of a unidirectional pass.
#[derive(Clone, Copy, Debug)]
pub struct SequenceOutput {
    /// `[T, hidden]`, row `t` is the state after consuming step `t`
    /// (in original time order, also for reversed passes).
    pub states: Var,
    /// State after the last consumed step.
    pub last: Var,
}

impl Cell {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        kind: CellKind,
        ps: &mut ParamSet<S>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        match kind {
            CellKind::Gru => Self::Gru(GruCell::new(ps, name, input_dim, hidden_dim, rng)),
            CellKind::Lstm => Self::Lstm(LstmCell::new(ps, name, input_dim, hidden_dim, rng)),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Self::Gru(_) => CellKind::Gru,
            Self::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Gru(c) => c.input_dim,
            Self::Lstm(c) => c.input_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            Self::Gru(c) => c.hidden_dim,
            Self::Lstm(c) => c.hidden_dim,
        }
    }

    pub fn param_count(kind: CellKind, input_dim: usize, hidden_dim: usize) -> usize {
        match kind {
            CellKind::Gru => GruCell::param_count(input_dim, hidden_dim),
            CellKind::Lstm => LstmCell::param_count(input_dim, hidden_dim),
        }
    }

    /// Runs over `xs: [T, input]` from `h0` (zeros when `None`); the memory
    /// cell of an LSTM always starts at zero.
    pub fn run<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bd: &Bound,
        xs: Var,
        reverse: bool,
        h0: Option<Var>,
    ) -> Result<SequenceOutput, AutodiffError> {
        let steps = match tape.shape(xs) {
            [t, _] => *t,
            other => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "run_sequence",
                    shapes: vec![other.to_vec()],
                })
            }
        };
        if steps == 0 {
            return Err(AutodiffError::EmptySequence);
        }
        let hd = self.hidden_dim();
        let zero = |tape: &mut Tape<S>| tape.constant_from(vec![1, hd], vec![S::zero(); hd]);
        let mut h = match h0 {
            Some(h) => h,
            None => zero(tape)?,
        };
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        let mut states = vec![h; steps];
        match self {
            Self::Gru(cell) => {
                let proj = cell.project(tape, bd, xs)?;
                for &t in &order {
                    let xw = tape.slice(proj, 0, t, 1)?;
                    h = cell.step_projected(tape, bd, xw, h)?;
                    states[t] = h;
                }
            }
            Self::Lstm(cell) => {
                let proj = cell.project(tape, bd, xs)?;
                let mut c = zero(tape)?;
                for &t in &order {
                    let xw = tape.slice(proj, 0, t, 1)?;
                    (h, c) = cell.step_projected(tape, bd, xw, h, c)?;
                    states[t] = h;
                }
            }
        }
        let stacked = tape.stack_rows(&states)?;
        Ok(SequenceOutput {
            states: stacked,
            last: h,
        })
    }
}

/// Forward and backward cells whose per-step outputs are concatenated.
#[derive(Clone, Debug)]
pub struct BiRecurrentLayer {
    pub forward: Cell,
    pub backward: Cell,
}

impl BiRecurrentLayer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        kind: CellKind,
        ps: &mut ParamSet<S>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward: Cell::new(kind, ps, &format!("{name}.fwd"), input_dim, hidden_dim, rng),
            backward: Cell::new(kind, ps, &format!("{name}.bwd"), input_dim, hidden_dim, rng),
        }
    }

    /// Both directions share one cell's parameters.
    pub fn tied(cell: Cell) -> Self {
        Self {
            forward: cell.clone(),
            backward: cell,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden_dim() + self.backward.hidden_dim()
    }

    pub fn param_count(kind: CellKind, input_dim: usize, hidden_dim: usize) -> usize {
        2 * Cell::param_count(kind, input_dim, hidden_dim)
    }

    /// `[T, feat] → [T, 2·hidden]`, row `t` = `[fwd_t ; bwd_t]`.
    pub fn run<S: Scalar>(&self, tape: &mut Tape<S>, bd: &Bound, xs: Var) -> Result<Var, AutodiffError> {
        let (fwd, bwd) = self.run_both(tape, bd, xs)?;
        tape.concat_last(&[fwd.states, bwd.states])
    }

    /// Both directional outputs, unmerged.
    pub fn run_both<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bd: &Bound,
        xs: Var,
    ) -> Result<(SequenceOutput, SequenceOutput), AutodiffError> {
        let fwd = self.forward.run(tape, bd, xs, false, None)?;
        let bwd = self.backward.run(tape, bd, xs, true, None)?;
        Ok((fwd, bwd))
    }
}
