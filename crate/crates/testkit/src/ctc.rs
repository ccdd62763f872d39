//! Exhaustive CTC path enumeration.

use hvslu::autodiff::gradcheck::relative_error;
use hvslu::ctc::{collapse_ctc, ctc_loss, required_frames};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::grad::FD_EPS;

/// `−ln Σ` over all `A^T` frame paths collapsing to `labels`; `+inf` when none does.
pub fn brute_force_loss(log_probs: &[f64], alphabet: usize, labels: &[usize], blank: usize) -> f64 {
    let frames = log_probs.len() / alphabet;
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse_ctc(&path, blank) == labels {
            total += path.iter().enumerate().map(|(t, &k)| log_probs[t * alphabet + k]).sum::<f64>().exp();
        }
        // Odometer increment.
        let mut i = 0;
        while i < frames {
            path[i] += 1;
            if path[i] < alphabet {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == frames {
            break;
        }
    }
    -total.ln()
}

#[derive(Clone, Debug)]
pub struct CtcCase {
    pub log_probs: Vec<f64>,
    pub alphabet: usize,
    pub labels: Vec<usize>,
    pub blank: usize,
}

/// Random feasible instance with `T ≤ 6`, `A ≤ 4`, `L ≤ 3`; rows are
/// normalized log-probabilities.
pub fn random_case(rng: &mut ChaCha8Rng) -> CtcCase {
    loop {
        let alphabet = rng.random_range(2..=4);
        let frames = rng.random_range(1..=6);
        let blank = rng.random_range(0..alphabet);
        let len = rng.random_range(0..=3);
        let labels: Vec<usize> = (0..len)
            .map(|_| {
                let k = rng.random_range(0..alphabet - 1);
                if k >= blank {
                    k + 1
                } else {
                    k
                }
            })
            .collect();
        if required_frames(&labels) > frames {
            continue;
        }
        let mut log_probs = Vec::with_capacity(frames * alphabet);
        for _ in 0..frames {
            let logits: Vec<f64> = (0..alphabet).map(|_| rng.random_range(-3.0..3.0)).collect();
            let norm = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
            log_probs.extend(logits.iter().map(|x| x - norm));
        }
        return CtcCase {
            log_probs,
            alphabet,
            labels,
            blank,
        };
    }
}

/// Largest `|ctc_loss − brute force|` over `n` random instances.
pub fn oracle_suite(n: usize, rng: &mut ChaCha8Rng) -> f64 {
    (0..n)
        .map(|_| {
            let c = random_case(rng);
            let fast = ctc_loss(&c.log_probs, c.alphabet, &c.labels, c.blank).unwrap().loss;
            (fast - brute_force_loss(&c.log_probs, c.alphabet, &c.labels, c.blank)).abs()
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of the analytic gradient against central differences
/// of the brute-force loss, over `n` random instances.
pub fn gradient_suite(n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let c = random_case(rng);
        let analytic = ctc_loss(&c.log_probs, c.alphabet, &c.labels, c.blank).unwrap().grad;
        for (i, &a) in analytic.iter().enumerate() {
            let mut lp = c.log_probs.clone();
            lp[i] += FD_EPS;
            let up = brute_force_loss(&lp, c.alphabet, &c.labels, c.blank);
            lp[i] -= 2.0 * FD_EPS;
            let down = brute_force_loss(&lp, c.alphabet, &c.labels, c.blank);
            worst = worst.max(relative_error(a, (up - down) / (2.0 * FD_EPS)));
        }
    }
    worst
}
