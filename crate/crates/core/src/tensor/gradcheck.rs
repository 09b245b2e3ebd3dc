//! Central finite-difference verification of tape gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Worst-coordinate outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Sweeps every coordinate of every parameter with a central difference of
/// width `h` and compares against the analytic gradient returned by `eval`.
///
/// `eval` must be deterministic: it receives candidate parameter values and
/// returns the scalar objective together with one gradient buffer per
/// parameter (evaluated at those values). Relative error per coordinate is
/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn grad_check<F>(params: &[Tensor], h: f64, mut eval: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if !(h > 0.0) {
        return Err(Error::contract("grad_check requires h > 0"));
    }
    let (_, analytic) = eval(params)?;
    if analytic.len() != params.len() {
        return Err(Error::contract(format!(
            "eval returned {} gradient buffers for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(&analytic).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape(format!(
                "gradient buffer {i} has length {}, parameter has {}",
                g.len(),
                p.len()
            )));
        }
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), coords_checked: 0 };

    for pi in 0..params.len() {
        for coord in 0..params[pi].len() {
            let original = work[pi].data()[coord];
            work[pi].data_mut()[coord] = original + h;
            let f_plus = eval(&work)?.0;
            work[pi].data_mut()[coord] = original - h;
            let f_minus = eval(&work)?.0;
            work[pi].data_mut()[coord] = original;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi][coord];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, coord);
            }
        }
    }
    Ok(report)
}
