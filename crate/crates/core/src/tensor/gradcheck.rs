//! Central finite differences against the tape's analytic gradients.

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<T: Real, F>(f: &mut F, x: Tensor<T>) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x);
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Contract(format!(
            "checked function must return a scalar, got shape {:?}",
            value.shape()
        )));
    }
    let y = value.item().f64();
    if !y.is_finite() {
        return Err(Error::Numeric("checked function evaluated to a non-finite value".into()));
    }
    Ok(y)
}

/// Autodiff gradient of the scalar `f` at `x`.
pub fn analytic_gradient<T: Real, F>(f: &mut F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    Ok(tape
        .take_grad(v)
        .expect("param leaf always receives a gradient"))
}

/// Central difference of `f` with respect to element `i` of `x`.
pub fn numeric_partial<T: Real, F>(f: &mut F, x: &Tensor<T>, i: usize, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut plus = x.clone();
    plus.data_mut()[i] = T::of(x.data()[i].f64() + step);
    let mut minus = x.clone();
    minus.data_mut()[i] = T::of(x.data()[i].f64() - step);
    Ok((eval(f, plus)? - eval(f, minus)?) / (2.0 * step))
}

/// Largest relative error between the autodiff gradient of the scalar-valued
/// `f` at `x` and its central finite differences, over every element of `x`.
pub fn finite_diff_check<T: Real, F>(mut f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(&mut f, x, step, &all)
}

/// Like [`finite_diff_check`], restricted to the listed flat indices.
pub fn finite_diff_check_at<T: Real, F>(
    f: &mut F,
    x: &Tensor<T>,
    step: f64,
    indices: &[usize],
) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    if !x.all_finite() {
        return Err(Error::Numeric("finite-difference point is not finite".into()));
    }
    let grad = analytic_gradient(f, x)?;
    let mut worst = 0.0f64;
    for &i in indices {
        let numeric = numeric_partial(f, x, i, step)?;
        worst = worst.max(relative_error(grad.data()[i].f64(), numeric));
    }
    Ok(worst)
}
