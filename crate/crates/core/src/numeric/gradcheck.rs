//! Central finite differences, the independent check on [`Graph::backward`].
//!
//! [`Graph::backward`]: super::Graph::backward

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Recommended step for 64-bit central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Estimates `∇f(x)` coordinate by coordinate as
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i] - h;
        let minus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericDomain(format!(
                "non-finite evaluation at coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Coordinates where both magnitudes fall below this are skipped by
/// [`max_relative_error`].
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

/// Largest `|a − b| / max(|a|, |b|)` over coordinates that are not both
/// below [`MAGNITUDE_FLOOR`].
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::dim("max_relative_error", analytic.shape(), numeric.shape()));
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .filter(|(a, b)| a.abs() >= MAGNITUDE_FLOOR || b.abs() >= MAGNITUDE_FLOOR)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()))
        .fold(0.0, f64::max))
}
