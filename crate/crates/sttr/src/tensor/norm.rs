//! Batch normalisation over the channel axis, with distinct train and eval
//! behaviour and running statistics for the latter.

use super::tape::{GradTape, Var};
use super::{Parameterized, Real, Tensor};
use crate::error::TensorError;

/// Whether a forward pass is part of training (batch statistics, dropout
/// active) or inference (running statistics, deterministic).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Re-exported batch statistics type from the tape op.
pub use super::tape::BatchStats;

pub struct BatchNorm<F: Real> {
    name: String,
    gamma: Tensor<F>,
    beta: Tensor<F>,
    running_mean: Tensor<F>,
    running_var: Tensor<F>,
    momentum: F,
    eps: F,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Tensor::full(&[channels], F::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], F::one()),
            momentum: F::of(0.1),
            eps: F::of(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Training mode normalises with batch statistics (and folds them into
    /// the running averages); eval mode applies the frozen affine transform.
    pub fn forward(&mut self, tape: &mut GradTape<F>, x: Var, mode: Mode) -> Result<Var, TensorError> {
        match mode {
            Mode::Train => {
                let g = tape.param(&format!("{}.gamma", self.name), &self.gamma);
                let b = tape.param(&format!("{}.beta", self.name), &self.beta);
                let (y, stats) = tape.batch_norm_train(x, g, b, self.eps)?;
                let m = self.momentum;
                let keep = F::one() - m;
                for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * v;
                }
                for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * v;
                }
                Ok(y)
            }
            Mode::Eval => {
                let scale: Vec<F> = self
                    .gamma
                    .data()
                    .iter()
                    .zip(self.running_var.data())
                    .map(|(&g, &v)| g / (v + self.eps).sqrt())
                    .collect();
                let shift: Vec<F> = self
                    .beta
                    .data()
                    .iter()
                    .zip(self.running_mean.data())
                    .zip(&scale)
                    .map(|((&b, &m), &s)| b - m * s)
                    .collect();
                tape.channel_affine(x, &scale, &shift)
            }
        }
    }
}

impl<F: Real> Parameterized<F> for BatchNorm<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        f(&format!("{}.gamma", self.name), &self.gamma);
        f(&format!("{}.beta", self.name), &self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        f(&format!("{}.running_mean", self.name), &self.running_mean);
        f(&format!("{}.running_var", self.name), &self.running_var);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f(&format!("{}.running_mean", self.name), &mut self.running_mean);
        f(&format!("{}.running_var", self.name), &mut self.running_var);
    }
}
