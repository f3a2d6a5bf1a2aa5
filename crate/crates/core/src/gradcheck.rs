//! Central finite differences over policy logits.

use crate::error::Result;
use crate::matrix::Matrix;
use crate::tabular::TabularPolicy;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerical gradient of `loss` by central differences with step `h`.
pub fn central_difference(
    policy: &TabularPolicy,
    h: f64,
    loss: impl Fn(&TabularPolicy) -> Result<f64>,
) -> Result<Matrix> {
    let (n, m) = policy.shape();
    let mut grad = Matrix::zeros(n, m);
    for x in 0..n {
        for y in 0..m {
            let mut plus = policy.logits().clone();
            plus.add_at(x, y, h);
            let mut minus = policy.logits().clone();
            minus.add_at(x, y, -h);
            let fp = loss(&TabularPolicy::new(plus)?)?;
            let fm = loss(&TabularPolicy::new(minus)?)?;
            grad.set(x, y, (fp - fm) / (2.0 * h));
        }
    }
    Ok(grad)
}

/// Normwise relative error `‖a − n‖∞ / max(‖a‖∞, floor)`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    diff / analytic.max_abs().max(floor)
}
