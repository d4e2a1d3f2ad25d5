//! Central-difference gradient oracle.

use super::ParamSet;
use crate::error::{Error, Result};
use crate::par::{map_indexed, Exec};

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all scalars.
    pub max_rel_err: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Central difference of `f` with respect to one scalar of `params`.
pub fn central_difference<F>(f: &F, params: &ParamSet, name: &str, index: usize, h: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let plus = f(&params.perturbed(name, index, h)?)?;
    let minus = f(&params.perturbed(name, index, -h)?)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Evaluation(format!(
            "non-finite value at perturbed `{name}`[{index}]"
        )));
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Compares the analytic gradient returned by `f` against central
/// differences of its value over every scalar in `params`.
///
/// `f` returns `(value, gradient)`; the gradient must carry every name in
/// `params` with matching shapes.
pub fn grad_check<F>(f: F, params: &ParamSet, h: f64) -> Result<GradReport>
where
    F: Fn(&ParamSet) -> Result<(f64, ParamSet)> + Sync + Send,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Parameter(format!("step h must lie in [1e-6, 1e-4], got {h}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Evaluation("non-finite value at base point".into()));
    }
    let value_only = |p: &ParamSet| f(p).map(|(v, _)| v);
    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let errs = map_indexed(Exec::default(), coords.len(), |j| -> Result<f64> {
        let (name, i) = &coords[j];
        let numeric = central_difference(&value_only, params, name, *i, h)?;
        let a = analytic.get(name)?;
        if a.len() != params.get(name)?.len() {
            return Err(Error::Evaluation(format!("gradient for `{name}` has wrong size")));
        }
        Ok((a.data()[*i] - numeric).abs() / numeric.abs().max(1.0))
    });
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        checked: coords.len(),
    };
    for (j, e) in errs.into_iter().enumerate() {
        let e = e?;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some(coords[j].clone());
        }
    }
    Ok(report)
}
