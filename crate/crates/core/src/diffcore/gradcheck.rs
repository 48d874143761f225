use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Array, Tape, Var};
use crate::error::{invalid, Error, Result};

/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    /// Worst relative error per input array.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Array<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::checked();
    let vars = inputs
        .iter()
        .map(|x| tape.leaf(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(invalid("grad_check needs a scalar-valued function"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares the reverse-mode gradient of a scalar function of several arrays
/// with `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate, in 64-bit.
pub fn grad_check<F>(op: &str, f: F, inputs: &[Array<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(invalid("grad_check step must be positive"));
    }
    let mut tape = Tape::checked();
    let vars = inputs
        .iter()
        .map(|x| tape.leaf(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Array<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(inputs[i].shape()));
        let mut worst = 0.0f64;
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + step;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[j] = x0 - step;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_err,
        per_input,
    })
}
