//! Central finite-difference gradient checker used as a test oracle.

use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient returned by `f` with central differences
/// at every element of `input`.
///
/// The relative error of element `i` is `|a_i - n_i| / max(|a_i|, |n_i|, s)`
/// where `s = 1e-3 * max_j |a_j|` keeps entries that are tiny relative to the
/// gradient's overall scale from being judged on round-off alone.
pub fn grad_check<F>(f: F, input: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let coords: Vec<usize> = (0..input.len()).collect();
    grad_check_at(f, input, tolerance, &coords)
}

/// Like [`grad_check`] but only probes the listed flat coordinates.
pub fn grad_check_at<F>(f: F, input: &Tensor, tolerance: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (_, analytic) = f(input)?;
    analytic.ensure_shape("grad_check", input.shape())?;
    let scale = 1e-3 * analytic.max_abs();
    let mut probe = input.clone();
    let mut max_rel = 0.0_f64;
    let mut worst = 0;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - STEP;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(scale).max(1e-12);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel || !rel.is_finite() {
            max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_index: worst,
        checked: coords.len(),
        tolerance,
        passed: max_rel < tolerance,
    })
}
