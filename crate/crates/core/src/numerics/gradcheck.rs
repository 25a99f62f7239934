use super::{Real, Tape, Tensor, Var};
use crate::error::{contract_err, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_abs_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Gradients smaller than this are compared in absolute terms.
fn rel_floor<T: Real>() -> f64 {
    if T::NAME == "f64" { 1e-6 } else { 1e-3 }
}

/// Checks every coordinate of `x`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<GradReport>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// Checks the listed flat coordinates of `x` with step `h`.
pub fn grad_check_coords<T, F>(f: F, x: &Tensor<T>, h: f64, coords: &[usize]) -> Result<GradReport>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    if h <= 0.0 {
        return Err(contract_err!("finite-difference step must be positive, got {h}"));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = f(&tape, xv)?;
        if out.numel() != 1 {
            return Err(contract_err!("grad_check needs a scalar map, got dims {:?}", out.dims()));
        }
        let grads = tape.backward(out)?;
        grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.dims()))
    };

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(probe);
        let out = f(&tape, xv)?;
        let v = out.value().item().as_f64();
        Ok(v)
    };

    let mut report = GradReport { max_abs_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for &i in coords {
        if i >= x.numel() {
            return Err(contract_err!("coordinate {i} out of range for {} values", x.numel()));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] = T::of(x.data()[i].as_f64() + h);
        let mut minus = x.clone();
        minus.data_mut()[i] = T::of(x.data()[i].as_f64() - h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(rel_floor::<T>());
        if err > report.max_abs_rel_error || report.checked == 0 {
            report.max_abs_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
