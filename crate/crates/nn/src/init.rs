use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::Tensor;

/// Zero-mean normal weights with standard deviation `gain / sqrt(fan_in)`.
pub fn kaiming_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut dyn RngCore) -> Tensor {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// Gain for a leaky rectifier with the given negative slope.
pub fn leaky_relu_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}
