use rand::Rng;

use crate::tensor::Tensor;

/// Uniform in `[-a, a]` with `a = 1/sqrt(fan_in)`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

/// Uniform in `[-a, a]` with `a = sqrt(6/fan_in)`, for layers followed by a relu.
pub fn uniform_relu(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    uniform_fan_in(shape, fan_in, rng).map(|v| v * 6f64.sqrt())
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape)
}
