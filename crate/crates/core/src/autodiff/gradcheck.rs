//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward values, so it is
//! independent of every backward rule it checks.

use crate::scalar::Scalar;

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use super::AutodiffError;

/// Denominator floor of [`relative_error`]; keeps near-zero gradients from
/// turning round-off into large relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest relative error over all checked entries.
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps`, for every entry of every parameter.
pub fn check_params<S, F>(params: &mut ParamSet<S>, eps: f64, f: F) -> Result<GradReport, AutodiffError>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &Bound) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let loss = f(&mut tape, &bound)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.to_f64_lossless()).collect(),
            None => vec![0.0; tape.value(v).len()],
        })
        .collect();
    drop(tape);

    let eval = |params: &ParamSet<S>| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape)?;
        let loss = f(&mut tape, &bound)?;
        Ok(tape.value(loss)[0].to_f64_lossless())
    };

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for (pi, &id) in ids.iter().enumerate() {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).values()[k];
            params.get_mut(id).values_mut()[k] = orig + S::lit(eps);
            let up = eval(params)?;
            params.get_mut(id).values_mut()[k] = orig - S::lit(eps);
            let down = eval(params)?;
            params.get_mut(id).values_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), k, a, numeric));
            }
        }
    }
    Ok(report)
}
