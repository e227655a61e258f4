//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

/// Compares an analytic gradient against central finite differences of `f`
/// at `x` and returns the worst relative error over coordinates:
///
/// max_i |analytic_i - central_i| / (|analytic_i| + |central_i| + 1e-12)
///
/// `f` must be deterministic. Non-finite evaluations are an oracle error.
pub fn finite_difference_check<F>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(Error::contract(format!(
            "finite_difference_check: {} coordinates but {} analytic entries",
            x.len(),
            analytic.len()
        )));
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
            return Err(Error::NonFinite(format!(
                "finite_difference_check: f non-finite at coordinate {i}"
            )));
        }
        let central = (up - down) / (2.0 * eps);
        let err = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
