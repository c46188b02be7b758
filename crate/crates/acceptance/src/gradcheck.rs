//! Central finite-difference gradient checks against the autodiff graph.

use abn_core::autodiff::{Graph, Var};
use abn_core::Result;

pub const EPSILON: f64 = 1e-4;

/// A differentiable input: shape and values.
#[derive(Clone, Debug)]
pub struct Input {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Input {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        Input {
            shape: shape.to_vec(),
            values,
        }
    }
}

fn evaluate(inputs: &[Input], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|i| g.leaf(&i.shape, i.values.clone(), grads))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let value = g.scalar(loss);
    if !grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let out = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok((value, out))
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest relative error, over all inputs, between the analytic gradient of
/// the scalar `f` and its central finite-difference estimate.
pub fn max_relative_error(inputs: &[Input], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let (_, analytic) = evaluate(inputs, f, true)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.values.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut probe = inputs.to_vec();
            probe[k].values[j] = input.values[j] + EPSILON;
            let (plus, _) = evaluate(&probe, f, false)?;
            probe[k].values[j] = input.values[j] - EPSILON;
            let (minus, _) = evaluate(&probe, f, false)?;
            *slot = (plus - minus) / (2.0 * EPSILON);
        }
        worst = worst.max(relative_error(&analytic[k], &numeric));
    }
    Ok(worst)
}
