//! Straight-line reference implementations shared by the test targets.

use latrex::autograd::{Graph, Var};
use latrex::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use latrex::losses::FeatureExtractor;
use latrex::{PixelImage, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn loop_l1(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a.data()[i] - b.data()[i]).abs();
    }
    s / a.len() as f64
}

/// Direct double loop over rows and columns.
pub fn loop_smoothness(r: &Tensor, l: &Tensor, alpha: f64) -> f64 {
    let [n, cr, h, w] = r.shape();
    let cl = l.shape()[1];
    let rmean =
        |b: usize, y: usize, x: usize| (0..cr).map(|c| r.at(b, c, y, x)).sum::<f64>() / cr as f64;
    let (mut sx, mut cx, mut sy, mut cy) = (0.0, 0usize, 0.0, 0usize);
    for b in 0..n {
        for c in 0..cl {
            for y in 0..h {
                for x in 0..w {
                    if x + 1 < w {
                        let gl = (l.at(b, c, y, x + 1) - l.at(b, c, y, x)).abs();
                        let gr = (rmean(b, y, x + 1) - rmean(b, y, x)).abs();
                        sx += gl * (alpha * gr).exp();
                        cx += 1;
                    }
                    if y + 1 < h {
                        let gl = (l.at(b, c, y + 1, x) - l.at(b, c, y, x)).abs();
                        let gr = (rmean(b, y + 1, x) - rmean(b, y, x)).abs();
                        sy += gl * (alpha * gr).exp();
                        cy += 1;
                    }
                }
            }
        }
    }
    let mx = if cx > 0 { sx / cx as f64 } else { 0.0 };
    let my = if cy > 0 { sy / cy as f64 } else { 0.0 };
    mx + my
}

pub fn loop_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let [_, ci, h, wd] = x.shape();
    let co = w.shape()[0];
    let (ho, wo) = ((h + 2 - 3) / stride + 1, (wd + 2 - 3) / stride + 1);
    Tensor::from_fn([1, co, ho, wo], |_, o, y, xx| {
        let mut acc = b.data()[o];
        for i in 0..ci {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (y * stride + ky) as isize - 1;
                    let ix = (xx * stride + kx) as isize - 1;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += w.at(o, i, ky, kx) * x.at(0, i, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

/// Features of each stage computed with plain loops, then stage-averaged MSE.
pub fn two_pass_perceptual(a: &Tensor, b: &Tensor, ex: &FeatureExtractor) -> f64 {
    let p = ex.params();
    let feats = |x: &Tensor| {
        let mut out = Vec::new();
        let mut y = x.clone();
        for (i, stride) in [1, 2, 2].into_iter().enumerate() {
            let w = p.by_name(&format!("stage{i}.weight")).unwrap();
            let bias = p.by_name(&format!("stage{i}.bias")).unwrap();
            y = loop_conv(&y, w, bias, stride).map(gelu);
            out.push(y.clone());
        }
        out
    };
    let (fa, fb) = (feats(a), feats(b));
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let mut s = 0.0;
        for i in 0..x.len() {
            s += (x.data()[i] - y.data()[i]).powi(2);
        }
        total += s / x.len() as f64;
    }
    total / fa.len() as f64
}

/// Relative error of the analytic gradient of `f` w.r.t. each input against
/// central differences.
pub fn grad_errors(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out);
    let mut errs = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = central_difference(
            |probe| {
                let mut h = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| h.input(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let o = f(&mut h, &vs);
                h.value(o).item()
            },
            &inputs[i],
            DEFAULT_STEP,
        );
        errs.push(max_relative_error(&analytic, &numeric));
    }
    errs
}

pub fn image(h: usize, w: usize, seed: u64) -> PixelImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Smooth structure plus noise so SSIM lands well inside (-1, 1).
    let phase: f64 = rng.random_range(0.0..6.0);
    PixelImage::new(Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let base = 0.5 + 0.3 * ((x as f64 * 0.4 + y as f64 * 0.25 + c as f64 + phase).sin());
        (base + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0)
    }))
    .unwrap()
}

pub fn ref_psnr(a: &PixelImage, b: &PixelImage) -> f64 {
    let (x, y) = (a.tensor().data(), b.tensor().data());
    let mut se = 0.0;
    for i in 0..x.len() {
        se += (x[i] - y[i]) * (x[i] - y[i]);
    }
    let mse = se / x.len() as f64;
    if mse == 0.0 {
        return 99.0;
    }
    (10.0 * (1.0 / mse).log10()).min(99.0)
}

/// SSIM evaluated window by window with a full 2-D Gaussian kernel.
pub fn ref_ssim(a: &PixelImage, b: &PixelImage) -> f64 {
    let (ta, tb) = (a.tensor(), b.tensor());
    let [_, ch, h, w] = ta.shape();
    let mut k = [[0.0f64; 11]; 11];
    let mut s = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            s += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..ch {
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = k[i][j] / s;
                        mx += wt * ta.at(0, c, y0 + i, x0 + j);
                        my += wt * tb.at(0, c, y0 + i, x0 + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = k[i][j] / s;
                        let dx = ta.at(0, c, y0 + i, x0 + j) - mx;
                        let dy = tb.at(0, c, y0 + i, x0 + j) - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cov += wt * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / ch as f64
}

pub fn noisy(a: &PixelImage, sigma: f64, seed: u64) -> PixelImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = a.tensor();
    PixelImage::new(Tensor::from_fn(t.shape(), |n, c, y, x| {
        (t.at(n, c, y, x) + rng.random_range(-sigma..sigma)).clamp(0.0, 1.0)
    }))
    .unwrap()
}

pub fn fixture() -> Vec<(PixelImage, PixelImage)> {
    (0..10)
        .map(|i| {
            let a = image(16 + i, 20 - i % 3, 100 + i as u64);
            let b = noisy(&a, 0.02 * (i + 1) as f64, 200 + i as u64);
            (a, b)
        })
        .collect()
}
