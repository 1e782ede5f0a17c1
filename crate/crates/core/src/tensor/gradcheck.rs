//! Central finite-difference checking of analytic gradients.

use super::params::{ParamGrads, ParamId, ParamSet};
use crate::error::{Error, Result};

/// Default perturbation step for double-precision checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Worst entry found by [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compares `analytic` against `(f(p+eps) - f(p-eps)) / 2eps` for every
/// parameter entry. The per-entry error is
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_difference_check<F>(
    params: &ParamSet,
    analytic: &ParamGrads,
    eps: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let base = f(params)?;
    let again = f(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "objective is not deterministic: {base} then {again}"
        )));
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut probe = params.clone();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let plus = f(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let minus = f(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if report.worst_param.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = Some(params.name(id).to_string());
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
