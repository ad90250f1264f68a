//! Central finite-difference checks for analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Worst norm-wise relative error over all checked tensors.
    pub max_rel_error: f64,
    /// Per-input relative errors, in input order.
    pub per_input: Vec<f64>,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` at the listed coordinates.
pub fn numeric_gradient(
    x: &Tensor,
    indices: &[usize],
    step: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Checks the gradient of a scalar function of several tensors.
///
/// `build` records the function on a fresh graph given one leaf per input.
pub fn check_inputs(
    inputs: &[Tensor],
    step: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let mut graph = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = build(&mut graph, &leaves)?;
    let grads = graph.backward(out)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(leaves[k])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let indices: Vec<usize> = (0..input.len()).collect();
        let numeric = numeric_gradient(input, &indices, step, |probe| {
            let mut g = Graph::inference();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.input(if j == k { probe.clone() } else { t.clone() }))
                .collect();
            let v = build(&mut g, &vars)?;
            Ok(g.scalar(v))
        })?;
        per_input.push(relative_error(&analytic, &numeric));
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        max_rel_error,
        per_input,
    })
}
