use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
/// so that entries with vanishing gradient are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter path and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of a scalar computation against central
/// finite differences on every parameter entry.
///
/// `f` must be deterministic: it is re-run twice per probed entry.
pub fn grad_check<F>(params: &mut ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::NonFinite("loss at the base point".into()));
        }
        tape.backward(loss)?
    };

    let eval = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for id in ids {
        let n = params.get(id).value.len();
        for k in 0..n {
            let orig = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval(params)?;
            params.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval(params)?;
            params.get_mut(id).value.data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(params.get(id).name.clone()));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}
