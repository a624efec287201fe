use crate::tensor::{Float, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)`.
pub fn rand_tensor<T: Float>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-1.0..1.0)))
}

/// Small integers in `[-3, 3]`, exact in any float type.
pub fn int_tensor<T: Float>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-3i32..=3) as f64))
}
