//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-8)`, maximised over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of a tensor.
pub fn numerical_gradient(
    f: impl Fn(&Tensor) -> Result<f64>,
    point: &Tensor,
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x = point.values()[i];
        probe.values_mut()[i] = x + step;
        let hi = f(&probe)?;
        probe.values_mut()[i] = x - step;
        let lo = f(&probe)?;
        probe.values_mut()[i] = x;
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}

/// Evaluates a graph-building function at `point` and returns the scalar
/// output together with its gradient with respect to the input.
pub fn value_and_grad(
    build: &impl Fn(&mut Graph, Var) -> Result<Var>,
    point: &Tensor,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let x = g.variable(point);
    let y = build(&mut g, x)?;
    let grads = g.backward(y)?;
    Ok((g.scalar_value(y), grads.get(x).into_values()))
}

/// Maximum relative error between the autodiff gradient of `build` and a
/// central difference with the given step.
pub fn grad_check(
    build: impl Fn(&mut Graph, Var) -> Result<Var>,
    point: &Tensor,
    step: f64,
) -> Result<f64> {
    let (_, analytic) = value_and_grad(&build, point)?;
    let numeric = numerical_gradient(|p| value_and_grad(&build, p).map(|(v, _)| v), point, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}
