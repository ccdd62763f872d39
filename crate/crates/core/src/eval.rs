//! Concept error rate scoring: unit-cost Levenshtein alignment, pooled
//! CER/CVER and relative error reduction.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("reference corpus contains no concepts")]
    NoReferenceConcepts,
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("baseline error rate must be positive, got {0}")]
    ZeroBaseline(f64),
}

/// One step of an alignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AlignOp<T> {
    Match(T),
    Substitute(T, T),
    Delete(T),
    Insert(T),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentResult<T> {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_count: usize,
    pub ops: Vec<AlignOp<T>>,
}

impl<T> AlignmentResult<T> {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn counts(&self) -> ErrorCounts {
        ErrorCounts {
            substitutions: self.substitutions,
            deletions: self.deletions,
            insertions: self.insertions,
            reference: self.reference_count,
        }
    }
}

/// Minimum-cost unit Levenshtein alignment. The backtrace runs from the end
/// and prefers diagonal (match/substitution), then up (deletion), then left
/// (insertion).
pub fn align_concepts<T: PartialEq + Clone>(reference: &[T], hypothesis: &[T]) -> AlignmentResult<T> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = sub.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    let (mut s, mut d, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(!same) == here {
                if same {
                    ops.push(AlignOp::Match(reference[i - 1].clone()));
                } else {
                    s += 1;
                    ops.push(AlignOp::Substitute(reference[i - 1].clone(), hypothesis[j - 1].clone()));
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * w + j] + 1 == here {
            d += 1;
            ops.push(AlignOp::Delete(reference[i - 1].clone()));
            i -= 1;
        } else {
            ins += 1;
            ops.push(AlignOp::Insert(hypothesis[j - 1].clone()));
            j -= 1;
        }
    }
    ops.reverse();
    AlignmentResult {
        substitutions: s,
        deletions: d,
        insertions: ins,
        reference_count: n,
        ops,
    }
}

/// Pooled error counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `100·(S + D + I) / N`.
    pub fn rate(&self) -> Result<f64, EvalError> {
        if self.reference == 0 {
            return Err(EvalError::NoReferenceConcepts);
        }
        Ok(100.0 * self.errors() as f64 / self.reference as f64)
    }
}

impl std::ops::AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.reference += o.reference;
    }
}

/// Counts pooled over utterance pairs.
pub fn pooled_counts<T: PartialEq + Clone>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<ErrorCounts, EvalError> {
    if refs.len() != hyps.len() {
        return Err(EvalError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let mut total = ErrorCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        total += align_concepts(r, h).counts();
    }
    Ok(total)
}

/// Concept error rate over tag sequences, in percent.
pub fn cer(refs: &[Vec<String>], hyps: &[Vec<String>]) -> Result<f64, EvalError> {
    pooled_counts(refs, hyps)?.rate()
}

/// Concept/value error rate over `(tag, value)` sequences, in percent.
pub fn cver(refs: &[Vec<(String, String)>], hyps: &[Vec<(String, String)>]) -> Result<f64, EvalError> {
    pooled_counts(refs, hyps)?.rate()
}

/// Rounds half away from zero to one decimal.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// `100·(baseline − system)/baseline`, rounded to one decimal.
pub fn relative_reduction(baseline: f64, system: f64) -> Result<f64, EvalError> {
    if baseline <= 0.0 || baseline.is_nan() {
        return Err(EvalError::ZeroBaseline(baseline));
    }
    Ok(round1(100.0 * (baseline - system) / baseline))
}

/// Per-concept error counts: substitutions and deletions are charged to the
/// reference concept, insertions to the hypothesized one.
pub fn errors_per_concept(refs: &[Vec<String>], hyps: &[Vec<String>], inventory: &[String]) -> Result<Vec<usize>, EvalError> {
    if refs.len() != hyps.len() {
        return Err(EvalError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let mut counts = vec![0usize; inventory.len()];
    let mut charge = |tag: &String| {
        if let Some(i) = inventory.iter().position(|c| c == tag) {
            counts[i] += 1;
        }
    };
    for (r, h) in refs.iter().zip(hyps) {
        for op in align_concepts(r, h).ops {
            match op {
                AlignOp::Match(_) => {}
                AlignOp::Substitute(t, _) | AlignOp::Delete(t) | AlignOp::Insert(t) => charge(&t),
            }
        }
    }
    Ok(counts)
}
