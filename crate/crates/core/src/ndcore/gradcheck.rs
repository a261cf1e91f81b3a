use crate::error::{DwfError, Result};

/// Compare an analytic gradient against central differences.
///
/// Returns the largest componentwise `|g_a − g_n| / max(1, |g_a|, |g_n|)`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(DwfError::Domain(format!("eps must be positive, got {eps}")));
    }
    if analytic.len() != x.len() {
        return Err(DwfError::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            x.len()
        )));
    }
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(DwfError::Evaluation(format!("f(x) = {f0}")));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(DwfError::Evaluation(format!(
                "non-finite value while perturbing component {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * eps);
        let ga = analytic[i];
        let err = (ga - numeric).abs() / 1f64.max(ga.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
