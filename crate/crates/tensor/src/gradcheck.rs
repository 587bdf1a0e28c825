//! Central-difference oracle for the reverse sweep.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Step used by the gradient-check suites.
pub const DEFAULT_EPS: f64 = 1e-4;
/// Largest accepted relative deviation between analytic and numeric gradients.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor: gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Outcome of comparing [`Graph::backward`] against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, RELATIVE_FLOOR)` over checked coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input, flat index) of the coordinate with the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Every coordinate of every input.
pub fn all_coords(inputs: &[Tensor<f64>]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect()
}

/// Checks every coordinate of every input. `f` receives the inputs as
/// parameter leaves, in order, and must return a scalar.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords = all_coords(inputs);
    finite_diff_check_coords(f, inputs, eps, &coords)
}

/// Same as [`finite_diff_check`] restricted to `(input, flat index)` pairs.
pub fn finite_diff_check_coords<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(TensorError::Parameter(format!(
            "finite-difference step must lie in [1e-6, 1e-3], got {eps}"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    finite(g.value(loss).item()?)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<&Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.wrt(v))
        .collect::<Result<_>>()?;

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[idx] += delta;
                }
                g.param(t)
            })
            .collect();
        let out = f(&mut g, &vars)?;
        finite(g.value(out).item()?)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &(which, idx) in coords {
        if which >= inputs.len() || idx >= inputs[which].numel() {
            return Err(TensorError::Contract(format!(
                "coordinate ({which}, {idx}) out of range"
            )));
        }
        let numeric = (eval(which, idx, eps)? - eval(which, idx, -eps)?) / (2.0 * eps);
        let a = analytic[which].data()[idx];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((which, idx));
        }
        report.checked += 1;
    }
    Ok(report)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::Numeric(format!("checked function returned {v}")))
    }
}
