//! Synthetic low/normal pairs: a random reflectance texture lit by two
//! random smooth illumination fields, one bright and one dark.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::ImagePair;
use crate::imaging::PixelImage;
use crate::tensor::Tensor;

fn texture<R: Rng>(size: usize, rng: &mut R) -> Tensor {
    let cell = (size / 8).max(2);
    let cells = size.div_ceil(cell);
    let blocks: Vec<f64> = (0..3 * cells * cells)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * TAU / size as f64,
                rng.random_range(0.5..3.0) * TAU / size as f64,
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    Tensor::from_fn([1, 3, size, size], |_, c, y, x| {
        let b = blocks[(c * cells + y / cell) * cells + x / cell];
        let (fy, fx, ph) = waves[c];
        let s = 0.5 + 0.5 * (fy * y as f64 + fx * x as f64 + ph).sin();
        0.15 + 0.85 * (0.6 * b + 0.4 * s)
    })
}

/// A smooth single-channel field in `[lo, hi]`.
fn illumination<R: Rng>(size: usize, lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let (gy, gx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let (cy, cx) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let width = rng.random_range(0.3..0.8);
    let mix = rng.random_range(0.3..0.7);
    Tensor::from_fn([1, 1, size, size], |_, _, y, x| {
        let (v, u) = (y as f64 / size as f64, x as f64 / size as f64);
        let ramp = 0.5 + 0.25 * (gy * (v - 0.5) + gx * (u - 0.5)) * 2.0;
        let bump = (-((v - cy).powi(2) + (u - cx).powi(2)) / (2.0 * width * width)).exp();
        let t = (mix * ramp + (1.0 - mix) * bump).clamp(0.0, 1.0);
        lo + (hi - lo) * t
    })
}

fn lit(r: &Tensor, l: &Tensor) -> PixelImage {
    let img = Tensor::from_fn(r.shape(), |_, c, y, x| {
        (r.at(0, c, y, x) * l.at(0, 0, y, x)).clamp(0.0, 1.0)
    });
    PixelImage::new(img).expect("product of [0, 1] factors")
}

/// `n` square pairs of side `size`, fully determined by `seed`.
pub fn toy_pairs(n: usize, size: usize, seed: u64) -> Vec<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let r = texture(size, &mut rng);
            let bright = illumination(size, 0.7, 1.0, &mut rng);
            let scale = rng.random_range(0.12..0.3);
            let dark = illumination(size, 0.5 * scale, scale, &mut rng);
            ImagePair::new(lit(&r, &dark), lit(&r, &bright), format!("toy{i:03}"))
                .expect("equal sizes")
        })
        .collect()
}
