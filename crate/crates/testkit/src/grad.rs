//! Randomized finite-difference trials for the differentiable building blocks.

use hvslu::autodiff::gradcheck::check_params;
use hvslu::autodiff::{AutodiffError, ConvGeometry, ParamSet, Tape, Tensor, Var};
use hvslu::layers::{Dense, GruCell, LstmCell};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-6;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Replaces every parameter with a fresh draw from `[-1, 1]`.
pub fn randomize(ps: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for t in ps.tensors_mut() {
        t.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

/// Weighted sum with a fixed random weight pattern, so that the loss is not
/// linear in the layer output.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, weights: &Tensor<f64>) -> Result<Var, AutodiffError> {
    let w = tape.constant(weights)?;
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    GruStep,
    LstmStep,
    Conv2d,
    Dense,
}

/// Worst relative error of one random trial.
pub fn grad_trial(target: GradTarget, rng: &mut ChaCha8Rng) -> f64 {
    let mut ps = ParamSet::<f64>::new();
    let report = match target {
        GradTarget::GruStep => {
            let (i, h) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let cell = GruCell::new(&mut ps, "gru", i, h, rng);
            randomize(&mut ps, rng);
            let x = uniform(rng, &[1, i], -1.0, 1.0);
            let h0 = uniform(rng, &[1, h], -1.0, 1.0);
            check_params(&mut ps, FD_EPS, |tape, bd| {
                let x = tape.constant(&x)?;
                let h0 = tape.constant(&h0)?;
                let h1 = cell.step(tape, bd, x, h0)?;
                tape.sum(h1)
            })
        }
        GradTarget::LstmStep => {
            let (i, h) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let cell = LstmCell::new(&mut ps, "lstm", i, h, rng);
            randomize(&mut ps, rng);
            let x = uniform(rng, &[1, i], -1.0, 1.0);
            let h0 = uniform(rng, &[1, h], -1.0, 1.0);
            let c0 = uniform(rng, &[1, h], -1.0, 1.0);
            let wh = uniform(rng, &[1, h], -1.0, 1.0);
            let wc = uniform(rng, &[1, h], -1.0, 1.0);
            check_params(&mut ps, FD_EPS, |tape, bd| {
                let x = tape.constant(&x)?;
                let h0 = tape.constant(&h0)?;
                let c0 = tape.constant(&c0)?;
                let (h1, c1) = cell.step(tape, bd, x, h0, c0)?;
                let a = weighted_sum(tape, h1, &wh)?;
                let b = weighted_sum(tape, c1, &wc)?;
                tape.add(a, b)
            })
        }
        GradTarget::Conv2d => {
            let (c, o) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let (f, t) = (rng.random_range(3..=6), rng.random_range(3..=6));
            let (kf, kt) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let geom = ConvGeometry::new(
                (kf, kt),
                (rng.random_range(1..=2), rng.random_range(1..=2)),
                (rng.random_range(0..=1), rng.random_range(0..=1)),
            );
            let input = ps.add("input", uniform(rng, &[c, f, t], -1.0, 1.0));
            let weight = ps.add("weight", uniform(rng, &[o, c, kf, kt], -1.0, 1.0));
            let bias = ps.add("bias", uniform(rng, &[o], -1.0, 1.0));
            let (fo, to) = geom.output_dims(f, t).unwrap();
            let w = uniform(rng, &[o, fo, to], -1.0, 1.0);
            check_params(&mut ps, FD_EPS, |tape, bd| {
                let y = tape.conv2d(bd[input], bd[weight], bd[bias], geom)?;
                weighted_sum(tape, y, &w)
            })
        }
        GradTarget::Dense => {
            let (i, o, n) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=3));
            let layer = Dense::new(&mut ps, "dense", i, o, rng);
            randomize(&mut ps, rng);
            let x = uniform(rng, &[n, i], -1.0, 1.0);
            let w = uniform(rng, &[n, o], -1.0, 1.0);
            check_params(&mut ps, FD_EPS, |tape, bd| {
                let x = tape.constant(&x)?;
                let y = layer.forward(tape, bd, x)?;
                let y = tape.tanh(y)?;
                weighted_sum(tape, y, &w)
            })
        }
    };
    report.expect("gradient check ran").max_rel_error
}

/// Worst relative error over `trials` random trials from `seed`.
pub fn grad_suite(target: GradTarget, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).map(|_| grad_trial(target, &mut rng)).fold(0.0, f64::max)
}
