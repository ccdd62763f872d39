//! Mini-batch plumbing shared by every trainer.

use crate::autodiff::{clip_grad_norm, AutodiffError, Bound, OptimizerKind, OptimizerState, ParamSet, Tape, Var};
use crate::scalar::Scalar;

/// Global gradient norm cap applied before each update.
pub const DEFAULT_CLIP_NORM: f64 = 5.0;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: DEFAULT_LEARNING_RATE,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

impl OptimConfig {
    pub fn state<S: Scalar>(&self) -> OptimizerState<S> {
        OptimizerState::new(self.optimizer, self.learning_rate)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    /// Sum of the per-example losses that contributed.
    pub loss_sum: f64,
    pub used: usize,
    pub skipped: usize,
}

impl std::ops::AddAssign for BatchStats {
    fn add_assign(&mut self, o: Self) {
        self.loss_sum += o.loss_sum;
        self.used += o.used;
        self.skipped += o.skipped;
    }
}

impl BatchStats {
    pub fn mean_loss(&self) -> f64 {
        if self.used == 0 {
            f64::NAN
        } else {
            self.loss_sum / self.used as f64
        }
    }
}

/// One update on the mean of the per-example losses `f` builds; an example
/// for which `f` returns `None` is skipped. No update happens when every
/// example is skipped.
pub fn train_batch<S, E, F>(
    params: &mut ParamSet<S>,
    opt: &mut OptimizerState<S>,
    clip_norm: f64,
    batch: &[usize],
    mut f: F,
) -> Result<BatchStats, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: FnMut(&mut Tape<S>, &Bound, usize) -> Result<Option<Var>, E>,
{
    train_batch_multi(&mut [(params, opt)], clip_norm, batch, |tape, bds, i| f(tape, &bds[0], i))
}

/// [`train_batch`] over several parameter sets bound to one tape, each with
/// its own optimizer. The clip norm applies to the union of all gradients.
pub fn train_batch_multi<S, E, F>(
    sets: &mut [(&mut ParamSet<S>, &mut OptimizerState<S>)],
    clip_norm: f64,
    batch: &[usize],
    mut f: F,
) -> Result<BatchStats, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: FnMut(&mut Tape<S>, &[Bound], usize) -> Result<Option<Var>, E>,
{
    let mut tape = Tape::new();
    let mut bounds = Vec::with_capacity(sets.len());
    for (ps, _) in sets.iter() {
        bounds.push(ps.bind(&mut tape)?);
    }
    let mut losses = Vec::with_capacity(batch.len());
    let mut stats = BatchStats::default();
    for &i in batch {
        match f(&mut tape, &bounds, i)? {
            Some(loss) => {
                stats.loss_sum += tape.value(loss)[0].to_f64_lossless();
                losses.push(loss);
            }
            None => stats.skipped += 1,
        }
    }
    stats.used = losses.len();
    if losses.is_empty() {
        return Ok(stats);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, S::lit(1.0 / losses.len() as f64))?;
    tape.backward(mean)?;
    for ((ps, _), bd) in sets.iter_mut().zip(&bounds) {
        ps.accumulate_grads(&tape, bd);
    }
    if sets.len() == 1 {
        clip_grad_norm(sets[0].0.tensors_mut(), S::lit(clip_norm));
    } else {
        let norm = sets
            .iter()
            .flat_map(|(ps, _)| ps.iter().filter_map(|(_, t)| t.grad()).flatten())
            .fold(S::zero(), |acc, &g| acc + g * g)
            .sqrt();
        if norm > S::lit(clip_norm) {
            let factor = S::lit(clip_norm) / norm;
            for (ps, _) in sets.iter_mut() {
                for t in ps.tensors_mut() {
                    if let Some(g) = t.grad_mut() {
                        g.iter_mut().for_each(|v| *v *= factor);
                    }
                }
            }
        }
    }
    for (ps, opt) in sets.iter_mut() {
        opt.step_set(ps)?;
    }
    Ok(stats)
}

/// Mean loss of `f` over `items` with frozen parameters (no update).
pub fn evaluate<S, E, F>(params: &ParamSet<S>, items: &[usize], mut f: F) -> Result<BatchStats, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: FnMut(&mut Tape<S>, &Bound, usize) -> Result<Option<Var>, E>,
{
    let mut stats = BatchStats::default();
    for &i in items {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape)?;
        match f(&mut tape, &bound, i)? {
            Some(loss) => {
                stats.loss_sum += tape.value(loss)[0].to_f64_lossless();
                stats.used += 1;
            }
            None => stats.skipped += 1,
        }
    }
    Ok(stats)
}
