use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and the differentiable input leaf and must
/// return a scalar. The result is the largest
/// `|analytic - numeric| / max(1e-12, |numeric|)` over all elements of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(input)?.clone();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.constant(probe);
        let out = f(&mut tape, input)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check: objective is not finite".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
