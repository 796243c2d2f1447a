use super::{DiffError, GradientMap, ParamMap, Result};

/// Central-difference gradient check.
///
/// `loss_fn` must be a deterministic map from parameters to a scalar loss;
/// `analytic` holds the gradients under test. Returns the max over all
/// parameter coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &ParamMap,
    analytic: &GradientMap,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&ParamMap) -> Result<f64>,
{
    assert!(eps > 0.0);
    let mut work = params.clone();
    let mut max_err = 0.0f64;
    for (name, base) in params {
        let grad = analytic
            .get(name)
            .ok_or_else(|| DiffError::KeyMismatch(name.clone()))?;
        for i in 0..base.len() {
            let orig = base.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let plus = loss_fn(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let minus = loss_fn(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(DiffError::NonFiniteLoss);
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
