use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;
use crate::tensor::Tensor;

/// Zero-mean normal weights with standard deviation `gain / sqrt(fan_in)`.
///
/// Use `gain = sqrt(2)` in front of rectified units.
pub fn fan_in_normal<F: Real, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor<F> {
    let shape = shape.into();
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
