//! Central finite-difference gradient checking in `f64`.
//!
//! Independent of the tape: the numeric side only ever evaluates the forward
//! function on perturbed inputs.

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per-input `||analytic - numeric|| / max(||numeric||, floor)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Builds a scalar loss from graph inputs.
pub trait LossFn: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> LossFn for F {}

fn eval(f: &impl LossFn, inputs: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let mut g = Graph::new(false, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Analytic gradients of `f` at `inputs`.
pub fn analytic(f: &impl LossFn, inputs: &[Tensor<f64>], seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new(false, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone().with_grad())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    Ok(vars.iter().map(|v| grads.of(*v).map(<[f64]>::to_vec).unwrap_or_default()).collect())
}

/// Central differences with step `h` for every input element.
pub fn numeric(f: &impl LossFn, inputs: &[Tensor<f64>], h: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut gi = vec![0.0; inputs[i].numel()];
        for (j, slot) in gi.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(f, &work, seed)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(f, &work, seed)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        out.push(gi);
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares analytic and numeric gradients for every input.
pub fn check(f: &impl LossFn, inputs: &[Tensor<f64>], h: f64, seed: u64) -> Result<GradCheckReport> {
    let a = analytic(f, inputs, seed)?;
    let n = numeric(f, inputs, h, seed)?;
    let relative_errors = a
        .iter()
        .zip(&n)
        .map(|(a, n)| {
            let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
            norm(&diff) / norm(n).max(1e-8)
        })
        .collect();
    Ok(GradCheckReport { relative_errors })
}
