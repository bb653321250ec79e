//! Central finite-difference gradient verification.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn eval<T, F>(f: &F, x: Tensor<T>) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = f(&mut g, xv)?;
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(TensorError::InvalidArgument(format!("gradient check needs a scalar function, got {:?}", v.shape())));
    }
    let v = v.item().f64();
    if !v.is_finite() {
        return Err(TensorError::Numeric("non-finite function value".into()));
    }
    Ok(v)
}

/// Analytic gradient of `f` at `x`.
pub fn analytic_gradient<T, F>(f: &F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Element,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.contiguous());
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let grad = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !grad.all_finite() {
        return Err(TensorError::Numeric("non-finite analytic gradient".into()));
    }
    Ok(grad)
}

/// Maximum relative error between the analytic gradient and central
/// differences with step `h`, over the coordinates in `coords`.
pub fn grad_check_coords<T, F>(f: F, x: &Tensor<T>, h: f64, coords: &[usize]) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, x)?;
    let a = analytic.to_vec();
    let base = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = base.clone();
        plus[i] = T::of(base[i].f64() + h);
        let mut minus = base.clone();
        minus[i] = T::of(base[i].f64() - h);
        let fp = eval(&f, Tensor::from_vec(x.shape(), plus)?)?;
        let fm = eval(&f, Tensor::from_vec(x.shape(), minus)?)?;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(a[i].f64(), numeric));
    }
    Ok(worst)
}

/// Maximum relative error over all coordinates of `x`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}
