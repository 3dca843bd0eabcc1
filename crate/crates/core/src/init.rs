//! Parameter initializers.

use mlt_autodiff::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Glorot-uniform `fan_in × fan_out` matrix: `U(-a, a)` with
/// `a = √(6 / (fan_in + fan_out))`, i.e. variance `2 / (fan_in + fan_out)`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-limit..limit))
}

/// Table with `N(0, std²)` entries.
pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Standard deviation of positional and label embedding tables.
pub const EMBEDDING_STD: f64 = 0.02;
