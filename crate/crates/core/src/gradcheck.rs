//! Central-difference verification of analytic gradients.

use thiserror::Error;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("non-finite function value or gradient")]
    NonFinite,
    #[error("{inputs} inputs but {grads} analytic gradient entries")]
    LengthMismatch { inputs: usize, grads: usize },
}

/// Largest `|fd - analytic| / max(1, |fd|)` over all coordinates, where `fd`
/// is the central difference of `f` with step [`FD_STEP`].
pub fn finite_diff_check<F>(f: F, inputs: &[f64], analytic: &[f64]) -> Result<f64, GradCheckError>
where
    F: Fn(&[f64]) -> f64,
{
    if inputs.len() != analytic.len() {
        return Err(GradCheckError::LengthMismatch {
            inputs: inputs.len(),
            grads: analytic.len(),
        });
    }
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(GradCheckError::NonFinite);
    }
    let mut x = inputs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(&x);
        x[i] = orig - FD_STEP;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(GradCheckError::NonFinite);
        }
        let fd = (up - down) / (2.0 * FD_STEP);
        worst = worst.max((fd - analytic[i]).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
