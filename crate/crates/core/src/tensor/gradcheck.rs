use super::{Tape, Tensor, Var};
use crate::error::Result;

/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_gradient<F>(mut f: F, point: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = point.clone();
    let mut out = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = x - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = x;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Compares the tape gradient of `f` at `point` with central differences.
///
/// Returns the maximum [`relative_error`] over coordinates, or `+∞` if any
/// difference quotient or analytic entry is not finite.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad_or_zeros(x);

    let numeric = numeric_gradient(
        |p| {
            let mut t = Tape::new();
            let x = t.constant(p.clone());
            let y = f(&mut t, x)?;
            Ok(t.value(y).data()[0])
        },
        point,
        h,
    )?;

    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        if !a.is_finite() || !n.is_finite() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(relative_error(a, n));
    }
    Ok(worst)
}
