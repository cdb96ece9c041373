use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{numel, Scalar, Tensor};

/// Normal(0, std) samples redrawn until they fall within two standard deviations.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..numel(shape))
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break T::c(x);
            }
        })
        .collect();
    Tensor::param(data, shape).expect("shape matches sample count")
}

pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let data = (0..numel(shape))
        .map(|_| T::c(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::param(data, shape).expect("shape matches sample count")
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::param(vec![T::zero(); numel(shape)], shape).expect("shape matches")
}

pub fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::param(vec![T::one(); numel(shape)], shape).expect("shape matches")
}
