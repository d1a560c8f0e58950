use alloc::vec::Vec;

use super::params::{Gradients, ParameterSet};
use crate::error::{Error, Result};

/// Central-difference gradient of `f` over every trainable coordinate of `params`.
pub fn finite_difference_oracle<F>(mut f: F, params: &ParameterSet, h: f64) -> Result<Gradients>
where
    F: FnMut(&ParameterSet) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::NonPositiveStep);
    }
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        flat[i] = base[i] + h;
        probe.set_flat(&flat)?;
        let plus = f(&probe)?;
        flat[i] = base[i] - h;
        probe.set_flat(&flat)?;
        let minus = f(&probe)?;
        flat[i] = base[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteObjective { coordinate: i });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Gradients::from_flat(params, &out)
}

/// Central differences of a function of a plain vector.
pub fn finite_difference_vec<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::NonPositiveStep);
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        x[i] = point[i] + h;
        let plus = f(&x)?;
        x[i] = point[i] - h;
        let minus = f(&x)?;
        x[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteObjective { coordinate: i });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    libm::sqrt(diff) / libm::sqrt(na).max(libm::sqrt(nb)).max(1e-12)
}
