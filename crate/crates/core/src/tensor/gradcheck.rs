//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest elementwise relative error between the tape gradient of `f` at `x`
/// and central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2eps`.
///
/// The relative error of a coordinate is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let numeric = central_difference(&f, x, i, eps)?;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// `||a - n|| / max(||a||, ||n||)` over the whole tensor, with `a` the tape
/// gradient and `n` central differences. Robust to coordinates whose
/// gradient is below finite-difference resolution.
pub fn grad_check_norm<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let a = analytic.data()[i];
        let n = central_difference(&f, x, i, eps)?;
        diff += (a - n) * (a - n);
        an += a * a;
        nn += n * n;
    }
    let scale = an.sqrt().max(nn.sqrt());
    Ok(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale })
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn analytic_grad<F>(f: &F, x: &Tensor<f64>) -> Result<Tensor<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    Ok(tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

pub fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv)?;
    let t = tape.value(y);
    if t.len() != 1 {
        return Err(Error::Tensor("grad_check needs a scalar function".into()));
    }
    Ok(t.item())
}

pub fn central_difference<F>(f: &F, x: &Tensor<f64>, i: usize, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut plus = x.clone();
    plus.data_mut()[i] += eps;
    let mut minus = x.clone();
    minus.data_mut()[i] -= eps;
    Ok((eval_scalar(f, &plus)? - eval_scalar(f, &minus)?) / (2.0 * eps))
}
