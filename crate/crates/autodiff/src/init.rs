use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::float::Float;
use crate::tensor::Tensor;

/// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
pub fn init_he<T: Float>(t: &mut Tensor<T>, fan_in: usize, rng: &mut impl Rng) {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    init_normal(t, 0.0, std, rng);
}

pub fn init_normal<T: Float>(t: &mut Tensor<T>, mean: f64, std: f64, rng: &mut impl Rng) {
    let dist = Normal::new(mean, std).expect("finite, non-negative std");
    for v in t.data_mut() {
        *v = T::of(dist.sample(rng));
    }
}
