//! Weight initialisation, deterministic under a seeded generator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};

/// Uniform on (-bound, bound).
pub fn uniform<F: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let numel: usize = shape.iter().product();
    let data: Vec<F> = (0..numel).map(|_| F::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Fan-in scaled uniform, bound 1/sqrt(fan_in): the default for convolution
/// and projection weights and their biases.
pub fn fan_in_uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}
