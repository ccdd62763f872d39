//! Connectionist temporal classification: log-space forward–backward loss
//! with its exact gradient, plus greedy decoding.
//!
//! The loss treats every entry `u_t(k)` of the `[T, A]` log-prob matrix as a
//! free variable: `P = Σ_π Π_t exp(u_t(π_t))` over the alignments `π` that
//! collapse to the labels, and `∂(−ln P)/∂u_t(k)` is minus the posterior
//! occupancy of symbol `k` at frame `t`. Chaining through a log-softmax is
//! left to the tape.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::scalar::{log_add, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("infeasible alignment: {frames} frames, labels need at least {required}")]
    Infeasible { frames: usize, required: usize },
    #[error("label {label} equals the blank id")]
    BlankLabel { label: usize },
    #[error("label {label} outside alphabet of size {alphabet}")]
    LabelOutOfRange { label: usize, alphabet: usize },
    #[error("log-probs must be [frames, alphabet] with both > 0, got {shape:?}")]
    BadShape { shape: Vec<usize> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// `L` plus one extra frame per adjacent repeated label (a blank must
/// separate them).
pub fn required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcOutput<S> {
    /// `−ln P(labels | log_probs)`.
    pub loss: S,
    /// `∂loss/∂log_probs`, row-major `[T, A]`.
    pub grad: Vec<S>,
}

fn validate(frames: usize, alphabet: usize, labels: &[usize], blank: usize) -> Result<(), CtcError> {
    if frames == 0 || alphabet == 0 || blank >= alphabet {
        return Err(CtcError::BadShape {
            shape: vec![frames, alphabet],
        });
    }
    for &label in labels {
        if label == blank {
            return Err(CtcError::BlankLabel { label });
        }
        if label >= alphabet {
            return Err(CtcError::LabelOutOfRange { label, alphabet });
        }
    }
    let required = required_frames(labels);
    if frames < required {
        return Err(CtcError::Infeasible { frames, required });
    }
    Ok(())
}

/// Loss and gradient for one utterance; `log_probs` is row-major `[frames, alphabet]`.
pub fn ctc_loss<S: Scalar>(
    log_probs: &[S],
    alphabet: usize,
    labels: &[usize],
    blank: usize,
) -> Result<CtcOutput<S>, CtcError> {
    let frames = if alphabet == 0 { 0 } else { log_probs.len() / alphabet };
    if frames * alphabet != log_probs.len() {
        return Err(CtcError::BadShape {
            shape: vec![log_probs.len(), alphabet],
        });
    }
    validate(frames, alphabet, labels, blank)?;

    // Blank-extended sequence: blank, l1, blank, l2, …, blank.
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    let n = ext.len();
    let ninf = S::neg_infinity();
    let u = |t: usize, k: usize| log_probs[t * alphabet + k];
    // Skip transition s-2 → s allowed for non-blank symbols differing from s-2.
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * n];
    alpha[0] = u(0, ext[0]);
    if n > 1 {
        alpha[1] = u(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * n);
        let prev = &prev[(t - 1) * n..];
        for s in 0..n {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            if acc != ninf {
                cur[s] = acc + u(t, ext[s]);
            }
        }
    }

    let mut beta = vec![ninf; frames * n];
    let last = (frames - 1) * n;
    beta[last + n - 1] = u(frames - 1, ext[n - 1]);
    if n > 1 {
        beta[last + n - 2] = u(frames - 1, ext[n - 2]);
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * n);
        let cur = &mut cur[t * n..];
        let next = &next[..n];
        for s in 0..n {
            let mut acc = next[s];
            if s + 1 < n {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < n && can_skip(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            if acc != ninf {
                cur[s] = acc + u(t, ext[s]);
            }
        }
    }

    let mut log_p = alpha[last + n - 1];
    if n > 1 {
        log_p = log_add(log_p, alpha[last + n - 2]);
    }
    if log_p == ninf {
        // Feasible by length but every path has zero probability; cannot
        // happen for finite log-probs.
        return Err(CtcError::Infeasible {
            frames,
            required: required_frames(labels),
        });
    }

    let mut grad = vec![S::zero(); frames * alphabet];
    for t in 0..frames {
        for s in 0..n {
            let ab = alpha[t * n + s] + beta[t * n + s];
            if ab == ninf {
                continue;
            }
            let k = ext[s];
            grad[t * alphabet + k] -= (ab - u(t, k) - log_p).exp();
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Records the CTC loss of `log_probs: [T, A]` on the tape.
pub fn ctc_loss_var<S: Scalar>(
    tape: &mut Tape<S>,
    log_probs: Var,
    labels: &[usize],
    blank: usize,
) -> Result<Var, CtcError> {
    let shape = tape.shape(log_probs).to_vec();
    if shape.len() != 2 {
        return Err(CtcError::BadShape { shape });
    }
    let out = ctc_loss(tape.value(log_probs), shape[1], labels, blank)?;
    Ok(tape.scalar_fn(log_probs, out.loss, out.grad)?)
}

/// Merges adjacent duplicates, then drops blanks.
pub fn collapse_ctc(frames: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &f in frames {
        if Some(f) != prev && f != blank {
            out.push(f);
        }
        prev = Some(f);
    }
    out
}

/// Per-frame argmax (first maximum on ties), then [`collapse_ctc`].
pub fn greedy_decode<S: Scalar>(log_probs: &[S], alphabet: usize, blank: usize) -> Vec<usize> {
    if alphabet == 0 {
        return Vec::new();
    }
    let best: Vec<usize> = log_probs
        .chunks(alphabet)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect();
    collapse_ctc(&best, blank)
}
