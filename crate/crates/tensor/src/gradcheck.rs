//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so near-zero gradients are
/// judged by absolute error instead of amplified finite-difference noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.shape(out) != [1, 1] {
        return Err(TensorError::Usage(format!(
            "grad_check needs a scalar function, got output {:?}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

/// Compares analytic gradients of the scalar function `f` against central
/// differences with the given step, over every element of every input.
/// Returns the worst relative error found.
pub fn grad_check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&f, inputs)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)).expect("valid shape"))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..probe[i].len() {
            let orig = probe[i].data()[e];
            probe[i].data_mut()[e] = orig + step;
            let plus = scalar_at(&f, &probe)?;
            probe[i].data_mut()[e] = orig - step;
            let minus = scalar_at(&f, &probe)?;
            probe[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, e));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn scalar_at<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, _, out) = evaluate(f, inputs)?;
    Ok(g.value(out).get(0, 0))
}
