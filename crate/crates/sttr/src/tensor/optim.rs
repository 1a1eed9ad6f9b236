//! Stochastic gradient descent with momentum, weight decay, and the step
//! schedule used throughout: decade drops at fixed epochs, optional linear
//! warmup over the first epochs.

use std::collections::HashMap;

use super::tape::Gradients;
use super::{Parameterized, Real};

#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate drops by 10x (cumulative).
    pub drop_epochs: Vec<usize>,
    /// Number of leading epochs over which the rate ramps linearly from 0.
    pub warmup_epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            drop_epochs: vec![60, 90],
            warmup_epochs: 0,
        }
    }
}

/// Learning rate at a point in training; `progress` is the fraction of the
/// current epoch already consumed, in [0, 1).
pub fn learning_rate(cfg: &SgdConfig, epoch: usize, progress: f64) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * ((epoch as f64 + progress) / cfg.warmup_epochs as f64);
    }
    // Divide step by step: 0.1 -> 0.01 -> 0.001 land on the exact literals,
    // which powi-style scaling misses.
    let drops = cfg.drop_epochs.iter().filter(|&&e| epoch >= e).count();
    (0..drops).fold(cfg.base_lr, |lr, _| lr / 10.0)
}

pub struct Sgd<F> {
    cfg: SgdConfig,
    velocity: HashMap<String, Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(cfg: SgdConfig) -> Self {
        Self { cfg, velocity: HashMap::new() }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn lr_at(&self, epoch: usize, progress: f64) -> f64 {
        learning_rate(&self.cfg, epoch, progress)
    }

    /// v <- momentum*v + g + wd*theta; theta <- theta - lr*v.
    pub fn step<M: Parameterized<F>>(&mut self, model: &mut M, grads: &Gradients<F>, lr: f64) {
        let lr = F::of(lr);
        let mom = F::of(self.cfg.momentum);
        let wd = F::of(self.cfg.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_params_mut(&mut |name, t| {
            let Some(g) = grads.param(name) else { return };
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![F::zero(); t.numel()]);
            for ((vi, &gi), ti) in v.iter_mut().zip(g.data()).zip(t.data_mut()) {
                *vi = mom * *vi + gi + wd * *ti;
                *ti = *ti - lr * *vi;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GradTape, Tensor};

    struct One {
        w: Tensor<f64>,
    }

    impl Parameterized<f64> for One {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
            f("w", &self.w);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("w", &mut self.w);
        }
    }

    #[test]
    fn two_steps_follow_the_recursion() {
        // w0 = 0, constant gradient 1, lr 0.1, momentum 0.9, no decay:
        // v1 = 1, w1 = -0.1; v2 = 1.9, w2 = -0.29.
        let cfg = SgdConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            drop_epochs: vec![],
            warmup_epochs: 0,
        };
        let mut model = One { w: Tensor::zeros(&[1]) };
        let mut opt = Sgd::new(cfg);
        for _ in 0..2 {
            let mut tape = GradTape::new();
            let w = tape.param("w", &model.w);
            let loss = tape.sum_all(w);
            let grads = tape.backward(loss).unwrap();
            opt.step(&mut model, &grads, 0.1);
        }
        assert!((model.w.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn schedule_steps_down_and_warms_up() {
        let cfg = SgdConfig { drop_epochs: vec![60, 90], ..Default::default() };
        assert_eq!(learning_rate(&cfg, 0, 0.0), 0.1);
        assert_eq!(learning_rate(&cfg, 59, 0.5), 0.1);
        assert_eq!(learning_rate(&cfg, 60, 0.0), 0.01);
        assert_eq!(learning_rate(&cfg, 90, 0.0), 0.001);
        let warm = SgdConfig { warmup_epochs: 1, ..Default::default() };
        assert_eq!(learning_rate(&warm, 0, 0.0), 0.0);
        assert!((learning_rate(&warm, 0, 0.5) - 0.05).abs() < 1e-15);
        assert_eq!(learning_rate(&warm, 1, 0.0), 0.1);
    }
}
