//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Worst relative error between the tape gradient of the scalar function `f`
/// at `x` and its central finite-difference estimate with step `h`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errs = gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)?;
    Ok(errs[0])
}

/// Like [`gradcheck`] for a function of several tensors; returns the worst
/// relative error per input.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} <= 0"
        )));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    drop(tape);

    let mut probe = inputs.to_vec();
    let mut worst = Vec::with_capacity(inputs.len());
    for (which, grad) in analytic.iter().enumerate() {
        let mut max_err: f64 = 0.0;
        for j in 0..grad.numel() {
            let orig = probe[which].data()[j];
            probe[which].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(relative_error(grad.data()[j], numeric));
        }
        worst.push(max_err);
    }
    Ok(worst)
}
