use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of `loss` at `params`.
///
/// Each coordinate is perturbed by `±step` in turn; `loss` must be
/// deterministic. Any non-finite evaluation is reported as a numeric error.
pub fn finite_difference_gradient<F>(mut loss: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::contract(format!("step must be positive, got {step}")));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = loss(&probe)?;
        probe[i] = params[i] - step;
        let down = loss(&probe)?;
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!(
                "loss is not finite when perturbing coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Largest violation of `|a - n| <= rel * max(|a|, |n|) + abs_floor` over all
/// coordinates, expressed as the ratio of error to allowance (≤ 1 passes).
pub fn gradient_mismatch(analytic: &[f64], numeric: &[f64], rel: f64, abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (rel * a.abs().max(n.abs()) + abs_floor))
        .fold(0.0, f64::max)
}
