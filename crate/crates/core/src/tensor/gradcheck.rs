use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares the tape gradient of `f` at `point` with central differences.
///
/// Returns the largest `|analytic − numeric| / max(1, |analytic|)` over all
/// coordinates of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape.grad(x).unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(p);
        let out = f(&mut t, v)?;
        Ok(t.value(out).data()[0] as f64)
    };

    let mut worst = 0.0f32;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        // the f32 step actually taken, not the nominal 2ε
        let step = plus.data()[i] as f64 - minus.data()[i] as f64;
        let numeric = (eval(plus)? - eval(minus)?) / step;
        let a = analytic.data()[i] as f64;
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err as f32);
    }
    Ok(worst)
}
