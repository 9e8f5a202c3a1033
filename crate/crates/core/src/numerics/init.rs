//! Seeded parameter initialisers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};

/// Zero-mean gaussian; the model default uses `std = 0.02`.
pub fn gaussian<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![T::zero(); numel]
    } else {
        let normal = Normal::new(0.0, std).expect("finite positive std");
        (0..numel).map(|_| T::of(normal.sample(rng))).collect()
    };
    Tensor::from_parts(shape.to_vec(), data)
}

/// Uniform on `[lo, hi)`.
pub fn uniform<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::of(lo + (hi - lo) * rng.random::<f64>()))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
