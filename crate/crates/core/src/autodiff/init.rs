use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::rng::Rng;

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("non-zero dims")
}

pub fn gaussian(shape: &[usize], sigma: f64, rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, sigma).expect("positive sigma");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("non-zero dims")
}
