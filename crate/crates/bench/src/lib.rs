//! Shared fixtures for the benchmarks.

use modelguard_core::ImageBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` uniform-noise MNIST-shaped images with cycling labels.
pub fn noise_batch(n: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * 784).map(|_| rng.random::<f32>()).collect();
    ImageBatch::new(pixels, (0..n).map(|i| i % 10).collect(), (28, 28, 1), 10).expect("valid batch")
}
