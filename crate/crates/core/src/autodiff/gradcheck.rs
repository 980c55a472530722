use crate::error::{Error, Result};

/// Compares an analytic gradient with central finite differences.
///
/// `f` returns the value and the analytic gradient at a point. The result is
/// `max_i |g_i - fd_i| / max(1, |g_i|)` over all coordinates.
pub fn grad_check<F>(f: F, params: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (value, grad) = f(params)?;
    if grad.len() != params.len() {
        return Err(Error::dim(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(
            "non-finite value or gradient at the check point".into(),
        ));
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p)?.0;
        p[i] = orig - step;
        let down = f(&p)?.0;
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value while perturbing coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(1.0));
    }
    Ok(worst)
}
