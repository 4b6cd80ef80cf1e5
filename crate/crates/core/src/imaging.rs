//! Pixel-domain transforms: the offset logarithm, its inverse, and the
//! single-channel guidance maps derived from a log image.
//!
//! `S = ln(1 + I)` keeps every value of a `[0, 1]` image inside `[0, ln 2]`,
//! so the transform stays finite on fully dark pixels and inverts exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Values within this distance outside `[0, 1]` are clamped instead of
/// rejected.
pub const RANGE_TOLERANCE: f64 = 1e-6;

/// An RGB image with intensities in `[0, 1]`, stored `[1, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage(Tensor);

impl PixelImage {
    /// Validates shape and range. Elements within [`RANGE_TOLERANCE`] of the
    /// bounds are clamped.
    pub fn new(t: Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 3 || h == 0 || w == 0 {
            return Err(Error::shape("PixelImage", "[1, 3, H>=1, W>=1]", t.shape()));
        }
        check_finite(&t)?;
        if let Some(v) = t
            .data()
            .iter()
            .find(|v| **v < -RANGE_TOLERANCE || **v > 1.0 + RANGE_TOLERANCE)
        {
            return Err(Error::InvalidInput(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self(t.map(|v| v.clamp(0.0, 1.0))))
    }

    /// Builds an image from interleaved 8-bit RGB bytes.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::shape(
                "PixelImage::from_rgb8",
                width * height * 3,
                bytes.len(),
            ));
        }
        Self::new(Tensor::from_fn([1, 3, height, width], |_, c, y, x| {
            bytes[(y * width + x) * 3 + c] as f64 / 255.0
        }))
    }

    /// Interleaved 8-bit RGB, rounded to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.push((self.0.at(0, c, y, x) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }
}

/// `ln(1 + I)` of a [`PixelImage`], stored `[1, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogImage(Tensor);

impl LogImage {
    /// Wraps a finite `[1, 3, H, W]` tensor. Values may exceed `ln 2`; they
    /// clamp on the way back to pixels.
    pub fn new(t: Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 3 || h == 0 || w == 0 {
            return Err(Error::shape("LogImage", "[1, 3, H>=1, W>=1]", t.shape()));
        }
        check_finite(&t)?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Which reduction produced a [`GuidanceMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceKind {
    /// Channel maximum used as the decomposer's illumination prior.
    PriorP,
    /// Channel mean; steers the reflectance refiner.
    Mean,
    /// Channel maximum; steers the illumination refiner.
    Max,
}

/// A single-channel map `[1, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMap {
    pub data: Tensor,
    pub kind: GuidanceKind,
}

fn check_finite(t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput("non-finite element".into()))
    }
}

/// `S = ln(1 + I)` elementwise.
pub fn log_forward(img: &PixelImage) -> LogImage {
    LogImage(img.0.map(f64::ln_1p))
}

/// `I = clamp(exp(S) - 1, 0, 1)` elementwise.
pub fn log_inverse(s: &LogImage) -> PixelImage {
    PixelImage(s.0.map(|v| v.exp_m1().clamp(0.0, 1.0)))
}

/// Tensor-level version of [`log_inverse`] for any channel count.
pub fn log_inverse_tensor(t: &Tensor) -> Tensor {
    t.map(|v| v.exp_m1().clamp(0.0, 1.0))
}

/// Per-pixel channel maximum of `s`: the decomposer's illumination prior.
pub fn illumination_prior(s: &LogImage) -> GuidanceMap {
    GuidanceMap {
        data: s.0.channel_max(),
        kind: GuidanceKind::PriorP,
    }
}

/// Per-pixel channel mean of `s`.
pub fn guidance_mean(s: &LogImage) -> GuidanceMap {
    GuidanceMap {
        data: s.0.channel_mean(),
        kind: GuidanceKind::Mean,
    }
}

/// Per-pixel channel maximum of `s`.
pub fn guidance_max(s: &LogImage) -> GuidanceMap {
    GuidanceMap {
        data: s.0.channel_max(),
        kind: GuidanceKind::Max,
    }
}
