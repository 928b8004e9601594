//! Central finite-difference gradient checking in double precision.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Analytic versus numeric gradient of one input tensor.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    /// `|a - n| / max(|a|, |n|, 1e-8)` over the whole gradient vector.
    pub fn relative_error(&self) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = self.analytic.iter().zip(&self.numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&self.analytic).max(norm(&self.numeric)).max(1e-8);
        norm(&diff) / scale
    }
}

/// Compares the gradient of the scalar built by `f` against central
/// differences with step `step`, for every input tensor.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<Vec<GradComparison>>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.item(out))
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = Vec::with_capacity(input.numel());
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= step;
            numeric.push((eval(&plus)? - eval(&minus)?) / (2.0 * step));
        }
        report.push(GradComparison { analytic, numeric });
    }
    Ok(report)
}
