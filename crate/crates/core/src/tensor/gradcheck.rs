use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Compares an analytic gradient against central differences.
///
/// Returns `max_i |analytic_i − fd_i| / max(1, |fd_i|)` where `fd_i` is the
/// central difference of `f` at `params` along coordinate `i` with step `h`.
pub fn finite_diff_check<F>(mut f: F, analytic: &Tensor, params: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(invalid(format!("step {h} outside [1e-6, 1e-4]")));
    }
    if analytic.shape() != params.shape() {
        return Err(invalid("analytic gradient shape differs from params"));
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let x = params.data()[i];
        probe.data_mut()[i] = x + h;
        let up = f(&probe);
        probe.data_mut()[i] = x - h;
        let down = f(&probe);
        probe.data_mut()[i] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let fd = (up - down) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
