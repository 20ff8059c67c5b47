//! Central-finite-difference oracle for gradients.

use crate::error::{invalid, Error, Result};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare the tape gradient of a scalar function against central finite
/// differences at `point`. Returns the worst relative error over coordinates,
/// with denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(invalid(format!("grad_check: step {step} outside [1e-7, 1e-3]")));
    }
    let mut params = ParamSet::new();
    params.insert("x", point.clone())?;

    let tape = Tape::new();
    let x = tape.param("x", point);
    let out = f(&tape, x)?;
    if out.value().numel() != 1 {
        return Err(invalid("grad_check: function must be scalar-valued"));
    }
    if !out.value().is_finite() {
        return Err(Error::NonFinite("grad_check: function value".into()));
    }
    let analytic = tape.backward(&out, &params)?.remove("x").expect("x registered");

    let eval = |p: &Tensor| -> Result<f64> {
        let t = Tape::new();
        let x = t.constant(p.clone());
        let v = f(&t, x)?.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check: perturbed function value".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
