//! Finite-difference verification of tape gradients, in 64-bit.

use super::tape::{GradTape, Var};
use super::{Parameterized, Tensor};
use crate::error::TensorError;

/// Central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name (or "input[i]") holding the worst element.
    pub worst: String,
}

impl GradReport {
    fn observe(&mut self, err: f64, site: &str) {
        self.checked += 1;
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = site.to_string();
        }
    }
}

fn scalar_loss(tape: &GradTape<f64>, loss: Var) -> Result<f64, TensorError> {
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss { shape: v.shape().to_vec() });
    }
    if !v.data()[0].is_finite() {
        return Err(TensorError::NonFinite("loss"));
    }
    Ok(v.data()[0])
}

/// Checks d(loss)/d(inputs) for a graph built by `f` from the given inputs.
pub fn grad_check_inputs(
    inputs: &[Tensor<f64>],
    f: &mut dyn FnMut(&mut GradTape<f64>, &[Var]) -> Result<Var, TensorError>,
    eps: f64,
) -> Result<GradReport, TensorError> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(&t.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars)?;
    scalar_loss(&tape, loss)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradReport { max_rel_err: 0.0, checked: 0, worst: String::new() };
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[ti].shape()));
        for j in 0..work[ti].numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let fp = eval_inputs(&work, f)?;
            work[ti].data_mut()[j] = orig - eps;
            let fm = eval_inputs(&work, f)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            report.observe(rel_err(analytic.data()[j], numeric), &format!("input[{ti}]"));
        }
    }
    Ok(report)
}

fn eval_inputs(
    inputs: &[Tensor<f64>],
    f: &mut dyn FnMut(&mut GradTape<f64>, &[Var]) -> Result<Var, TensorError>,
) -> Result<f64, TensorError> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = f(&mut tape, &vars)?;
    scalar_loss(&tape, loss)
}

/// Checks d(loss)/d(theta) for every parameter a model registers on the tape,
/// plus d(loss)/d(inputs). The forward closure may mutate the model (running
/// statistics); the loss value must not depend on that mutable state.
pub fn grad_check_model<M: Parameterized<f64>>(
    model: &mut M,
    inputs: &[Tensor<f64>],
    f: &mut dyn FnMut(&mut GradTape<f64>, &mut M, &[Var]) -> Result<Var, TensorError>,
    eps: f64,
) -> Result<GradReport, TensorError> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(&t.clone().with_grad())).collect();
    let loss = f(&mut tape, model, &vars)?;
    scalar_loss(&tape, loss)?;
    let grads = tape.backward(loss)?;

    let mut report = GradReport { max_rel_err: 0.0, checked: 0, worst: String::new() };

    let mut names: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |name, t| names.push((name.to_string(), t.numel())));
    for (name, numel) in names {
        let analytic = grads
            .param(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[numel]));
        for j in 0..numel {
            let fp = eval_perturbed(model, inputs, f, &name, j, eps)?;
            let fm = eval_perturbed(model, inputs, f, &name, j, -eps)?;
            let numeric = (fp - fm) / (2.0 * eps);
            report.observe(rel_err(analytic.data()[j], numeric), &name);
        }
    }

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[ti].shape()));
        for j in 0..work[ti].numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let fp = eval_model(model, &work, f)?;
            work[ti].data_mut()[j] = orig - eps;
            let fm = eval_model(model, &work, f)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            report.observe(rel_err(analytic.data()[j], numeric), &format!("input[{ti}]"));
        }
    }
    Ok(report)
}

fn nudge<M: Parameterized<f64>>(model: &mut M, name: &str, j: usize, delta: f64) {
    model.visit_params_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[j] += delta;
        }
    });
}

fn eval_model<M: Parameterized<f64>>(
    model: &mut M,
    inputs: &[Tensor<f64>],
    f: &mut dyn FnMut(&mut GradTape<f64>, &mut M, &[Var]) -> Result<Var, TensorError>,
) -> Result<f64, TensorError> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = f(&mut tape, model, &vars)?;
    scalar_loss(&tape, loss)
}

fn eval_perturbed<M: Parameterized<f64>>(
    model: &mut M,
    inputs: &[Tensor<f64>],
    f: &mut dyn FnMut(&mut GradTape<f64>, &mut M, &[Var]) -> Result<Var, TensorError>,
    name: &str,
    j: usize,
    delta: f64,
) -> Result<f64, TensorError> {
    nudge(model, name, j, delta);
    let out = eval_model(model, inputs, f);
    nudge(model, name, j, -delta);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        let x = Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.05]).unwrap();
        let report = grad_check_inputs(
            &[x],
            &mut |tape, vars| {
                let y = tape.mul(vars[0], vars[0])?;
                Ok(tape.sum_all(y))
            },
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn deliberately_wrong_gradient_is_caught() {
        // scale-by-2 forward with a sum loss has gradient 2, so pretending the
        // function is scale-by-3 in the numeric direction must trip the check.
        let x = Tensor::new(vec![2], vec![0.4, -0.2]).unwrap();
        let mut flip = false;
        let report = grad_check_inputs(
            &[x],
            &mut |tape, vars| {
                let c = if flip { 3.0 } else { 2.0 };
                flip = true;
                let y = tape.scale(vars[0], c);
                Ok(tape.sum_all(y))
            },
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.2);
    }
}
