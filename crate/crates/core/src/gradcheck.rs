//! Central finite-difference gradient checker.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-component relative error `|a − n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        step,
        None,
    )
}

/// Like [`grad_check`] over several inputs at once. With `max_components`,
/// only an evenly strided subset of each input's components is perturbed.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    max_components: Option<usize>,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(Error::Domain(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|v| grads.data(*v).expect("param requires grad").into_owned())
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = match max_components {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[which][i], numeric));
        }
    }
    Ok(worst)
}
