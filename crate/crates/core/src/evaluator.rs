//! Image-quality metrics, the illumination-swap test of decomposition
//! quality, and dataset-level reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::ImagePair;
use crate::decomposer::{
    decompose, prepare_input, reconstruct, to_pixels, DecomposerWeights, LatentComponents,
};
use crate::error::{Error, Result};
use crate::imaging::PixelImage;
use crate::refiner::{enhance, RefinerWeights};
use crate::tensor::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &Tensor, b: &Tensor, ctx: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(ctx, a.shape(), b.shape()));
    }
    Ok(())
}

/// PSNR with peak 1 on raw tensors, capped at [`PSNR_CAP`].
pub fn psnr_tensor(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub fn psnr(a: &PixelImage, b: &PixelImage) -> Result<f64> {
    psnr_tensor(a.tensor(), b.tensor())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM per channel (Gaussian window, valid positions only), averaged
/// over channels. Tensors must be `[1, C, H, W]` with `H, W ≥ 11`.
pub fn ssim_tensor(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let [n, c, h, w] = a.shape();
    if n != 1 {
        return Err(Error::shape("ssim batch", 1, n));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.data()[ch * plane..(ch + 1) * plane];
        let y = &b.data()[ch * plane..(ch + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let vx = sxx[i] - mu_x * mu_x;
            let vy = syy[i] - mu_y * mu_y;
            let cov = sxy[i] - mu_x * mu_y;
            acc += ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

pub fn ssim(a: &PixelImage, b: &PixelImage) -> Result<f64> {
    ssim_tensor(a.tensor(), b.tensor())
}

/// Which input image a swap reconstruction is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapTarget {
    Low,
    Normal,
}

/// PSNR of the four reconstructions `rec(R_a, L_b)`, each scored against the
/// image that supplied `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SwapResult {
    pub psnr_ll: f64,
    pub psnr_ln: f64,
    pub psnr_nl: f64,
    pub psnr_nn: f64,
    /// Targets of `ll`, `ln`, `nl`, `nn`, in that order.
    pub targets: [SwapTarget; 4],
}

impl SwapResult {
    pub fn mean(&self) -> f64 {
        (self.psnr_ll + self.psnr_ln + self.psnr_nl + self.psnr_nn) / 4.0
    }

    /// Field-wise mean over several pairs; `None` when `results` is empty.
    pub fn average(results: &[SwapResult]) -> Option<SwapResult> {
        let first = results.first()?;
        let n = results.len() as f64;
        let avg = |f: fn(&SwapResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        Some(SwapResult {
            psnr_ll: avg(|r| r.psnr_ll),
            psnr_ln: avg(|r| r.psnr_ln),
            psnr_nl: avg(|r| r.psnr_nl),
            psnr_nn: avg(|r| r.psnr_nn),
            targets: first.targets,
        })
    }
}

/// Decomposes both images, reconstructs the four `(R, L)` combinations and
/// scores each in the pixel domain.
pub fn swap_protocol(
    low: &PixelImage,
    normal: &PixelImage,
    dw: &DecomposerWeights,
) -> Result<SwapResult> {
    let strategy = dw.strategy();
    let (xl, pl) = prepare_input(low, strategy);
    let (xn, pn) = prepare_input(normal, strategy);
    let cl = decompose(&xl, &pl, dw)?;
    let cn = decompose(&xn, &pn, dw)?;
    let score = |r: &Tensor, l: &Tensor, l_from: SwapTarget| -> Result<f64> {
        let c = LatentComponents {
            r: r.clone(),
            l: l.clone(),
            strategy,
        };
        let out = to_pixels(&reconstruct(&c, dw)?, strategy);
        let target = match l_from {
            SwapTarget::Low => low,
            SwapTarget::Normal => normal,
        };
        psnr_tensor(&out, target.tensor())
    };
    use SwapTarget::{Low, Normal};
    Ok(SwapResult {
        psnr_ll: score(&cl.r, &cl.l, Low)?,
        psnr_ln: score(&cl.r, &cn.l, Normal)?,
        psnr_nl: score(&cn.r, &cl.l, Low)?,
        psnr_nn: score(&cn.r, &cn.l, Normal)?,
        targets: [Low, Normal, Low, Normal],
    })
}

/// PSNR of `to_pixels(reconstruct(decompose(x)))` against `img`.
pub fn reconstruction_psnr(img: &PixelImage, dw: &DecomposerWeights) -> Result<f64> {
    let (x, p) = prepare_input(img, dw.strategy());
    let c = decompose(&x, &p, dw)?;
    let out = to_pixels(&reconstruct(&c, dw)?, dw.strategy());
    psnr_tensor(&out, img.tensor())
}

/// Anything that maps a low-light image to an enhanced one.
pub trait Enhancer: Sync {
    fn enhance(&self, low: &PixelImage) -> Result<PixelImage>;
}

/// Returns the input unchanged.
pub struct Identity;

impl Enhancer for Identity {
    fn enhance(&self, low: &PixelImage) -> Result<PixelImage> {
        Ok(low.clone())
    }
}

/// A trained decomposer plus refiners.
pub struct Pipeline<'a> {
    pub decomposer: &'a DecomposerWeights,
    pub refiner: &'a RefinerWeights,
}

impl Enhancer for Pipeline<'_> {
    fn enhance(&self, low: &PixelImage) -> Result<PixelImage> {
        enhance(low, self.decomposer, self.refiner)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetric {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetric>,
    pub count: usize,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetric>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("no images to evaluate".into()));
        }
        let p: Vec<f64> = images.iter().map(|m| m.psnr).collect();
        let s: Vec<f64> = images.iter().map(|m| m.ssim).collect();
        let (mean_psnr, std_psnr) = mean_std(&p);
        let (mean_ssim, std_ssim) = mean_std(&s);
        Ok(Self {
            count: images.len(),
            images,
            mean_psnr,
            std_psnr,
            mean_ssim,
            std_ssim,
        })
    }

    /// `image_id,psnr,ssim` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,psnr,ssim\n");
        for m in &self.images {
            let _ = writeln!(out, "{},{:.6},{:.6}", m.image_id, m.psnr, m.ssim);
        }
        out
    }

    /// One line per image followed by the aggregate block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# metrics computed in RGB on [0, 1] floats, psnr capped at {PSNR_CAP} dB"
        );
        for m in &self.images {
            let _ = writeln!(
                out,
                "{:<24} psnr {:>8.4} dB  ssim {:.5}",
                m.image_id, m.psnr, m.ssim
            );
        }
        let _ = writeln!(out, "images     {}", self.count);
        let _ = writeln!(
            out,
            "psnr mean  {:.4} dB (std {:.4})",
            self.mean_psnr, self.std_psnr
        );
        let _ = writeln!(
            out,
            "ssim mean  {:.5} (std {:.5})",
            self.mean_ssim, self.std_ssim
        );
        out
    }
}

/// Enhances every low image and scores it against its normal partner.
pub fn eval_dataset(model: &dyn Enhancer, pairs: &[ImagePair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let images = pairs
        .par_iter()
        .map(|p| {
            let out = model.enhance(&p.low)?;
            Ok(ImageMetric {
                image_id: p.scene_id.clone(),
                psnr: psnr(&out, &p.normal)?,
                ssim: ssim(&out, &p.normal)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_images(images)
}
