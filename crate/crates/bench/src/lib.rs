//! Seeded inputs shared by the benchmarks in `benches/`.

use latrex::{PixelImage, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)`.
pub fn random_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// An RGB image with values in `[0, 1)`.
pub fn random_image(height: usize, width: usize, seed: u64) -> PixelImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PixelImage::new(Tensor::from_fn([1, 3, height, width], |_, _, _, _| {
        rng.random()
    }))
    .expect("values in range")
}
