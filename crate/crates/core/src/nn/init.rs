use rand::Rng;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

/// `[fan_in, fan_out]` matrix drawn from `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-a..a)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized by construction")
}
