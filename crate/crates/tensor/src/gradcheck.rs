//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-input relative error, measured as
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|)`.
    pub max_rel_error: f64,
    /// Per-input relative errors, in input order.
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Fixed pseudo-random weights in `[-1, 1]` that turn a tensor output into a scalar.
fn projection(n: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![n], |k| ((k as f64 + 1.0) * 0.754_877_666).fract() * 2.0 - 1.0)
}

fn scalarize(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return tape.reshape(out, vec![]);
    }
    let n = tape.value(out).numel();
    let flat = tape.reshape(out, vec![n])?;
    let w = tape.constant(projection(n));
    let prod = tape.mul(flat, w)?;
    Ok(tape.sum(prod))
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out)?;
    Ok(tape.value(loss).item())
}

/// Compares the tape's gradient of `f` with central differences of step `step`
/// for every input. Non-scalar outputs are reduced with fixed projection weights.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut numeric = Vec::with_capacity(input.numel());
        for k in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let bump = |t: &mut Tensor<f64>, delta: f64| {
                let mut data = t.data().to_vec();
                data[k] += delta;
                *t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
            };
            bump(&mut plus[i], step);
            bump(&mut minus[i], -step);
            numeric.push((evaluate(&f, &plus)? - evaluate(&f, &minus)?) / (2.0 * step));
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        per_input.push(if scale < 1e-12 { diff } else { diff / scale });
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        per_input,
    })
}
