//! Central-difference gradient checking.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Largest per-coordinate relative error between `analytic` and the central
/// difference `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
///
/// The relative error of a coordinate is
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(Error::Shape(format!("{} gradient entries for {} parameters", analytic.len(), x.len())));
    }
    if !(h > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe: Vec<f64> = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("objective is non-finite around coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
