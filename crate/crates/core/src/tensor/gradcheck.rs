//! Finite-difference gradient verification.
//!
//! The numeric side perturbs each element of the checked tensors by `±h`
//! and re-runs the forward closure from scratch, so it is independent of the
//! backward implementation it validates. Meant to run with `f64` tensors.

use super::Tensor;
use crate::error::Result;

/// Per-op relative-error tolerance.
pub const PER_OP_TOL: f64 = 1e-3;
/// End-to-end (full model) tolerance.
pub const FULL_MODEL_TOL: f64 = 1e-2;
/// Central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Symmetric relative error with an absolute floor.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares analytic gradients of `f()` against central differences with
/// respect to every element of `wrt`. The closure must be deterministic and
/// must read the current values of `wrt` (share the same tensors). Returns
/// the maximum relative error over all checked elements.
pub fn gradcheck_wrt(
    f: impl Fn() -> Result<Tensor<f64>>,
    wrt: &[Tensor<f64>],
    step: f64,
) -> Result<f64> {
    for t in wrt {
        t.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut max_err: f64 = 0.0;
    for (ti, t) in wrt.iter().enumerate() {
        for i in 0..t.len() {
            let orig = t.values()[i];
            t.values_mut()[i] = orig + step;
            let plus = f()?.item();
            t.values_mut()[i] = orig - step;
            let minus = f()?.item();
            t.values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic[ti][i], numeric));
        }
    }
    Ok(max_err)
}
