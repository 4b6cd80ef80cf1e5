//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the nodes in reverse and
//! accumulates gradients into every node that transitively depends on a
//! trainable leaf. Nodes built only from constants never allocate gradients,
//! which is how frozen sub-networks stay out of the backward pass.
//!
//! All kernels are single-threaded with a fixed reduction order, so a forward
//! and backward pass is bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcastC(Var, Var),
    MulBcastC(Var, Var),
    Scale(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConvTranspose2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNormC {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SliceC {
        x: Var,
        start: usize,
    },
    ConcatC(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        temp: Var,
        heads: usize,
        scores: Vec<f64>,
        probs: Vec<f64>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Abs(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    DiffW(Var),
    DiffH(Var),
    MeanC(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass plus its gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// `c = alpha * a·b + beta * c` on strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views that lie within `a`, `b` and `c`,
    // which every call site sizes as m×k, k×n and m×n respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.ci {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let out = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            out[oy * self.wo + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                plane[iy as usize * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.ci {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant: never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf: its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Errors if `v` holds any NaN or infinity; `layer` names the producer.
    pub fn ensure_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                layer: layer.to_string(),
            })
        }
    }

    fn same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(ctx, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn check_bcast(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        let [n, _, h, w] = self.shape(a);
        if self.shape(b) != [n, 1, h, w] {
            return Err(Error::shape(ctx, [n, 1, h, w], self.shape(b)));
        }
        Ok(())
    }

    /// `a + b` where `b` has one channel broadcast over the channels of `a`.
    pub fn add_bcast_c(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_bcast(a, b, "add_bcast_c")?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(av.shape(), |n, c, h, w| {
            av.at(n, c, h, w) + bv.at(n, 0, h, w)
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddBcastC(a, b), rg))
    }

    /// `a ⊙ b` where `b` has one channel broadcast over the channels of `a`.
    pub fn mul_bcast_c(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_bcast(a, b, "mul_bcast_c")?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(av.shape(), |n, c, h, w| {
            av.at(n, c, h, w) * bv.at(n, 0, h, w)
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MulBcastC(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    /// Elementwise clip to `[lo, hi]`; the gradient is zero outside the open
    /// interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp { x: a, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Forward difference along width: `x[.., w + 1] - x[.., w]`.
    pub fn diff_w(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        let value = Tensor::from_fn([n, c, h, w.saturating_sub(1)], |ni, ci, hi, wi| {
            av.at(ni, ci, hi, wi + 1) - av.at(ni, ci, hi, wi)
        });
        let rg = self.rg(a);
        self.push(value, Op::DiffW(a), rg)
    }

    /// Forward difference along height: `x[.., h + 1, ..] - x[.., h, ..]`.
    pub fn diff_h(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        let value = Tensor::from_fn([n, c, h.saturating_sub(1), w], |ni, ci, hi, wi| {
            av.at(ni, ci, hi + 1, wi) - av.at(ni, ci, hi, wi)
        });
        let rg = self.rg(a);
        self.push(value, Op::DiffH(a), rg)
    }

    /// Mean over channels, `[N, 1, H, W]`.
    pub fn mean_c(&mut self, a: Var) -> Var {
        let value = self.value(a).channel_mean();
        let rg = self.rg(a);
        self.push(value, Op::MeanC(a), rg)
    }

    pub fn slice_c(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        if start + len > c {
            return Err(Error::shape("slice_c", c, start + len));
        }
        let value = Tensor::from_fn([n, len, h, w], |ni, ci, hi, wi| {
            av.at(ni, start + ci, hi, wi)
        });
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceC { x: a, start }, rg))
    }

    pub fn concat_c(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_c", av.shape(), bv.shape()));
        }
        let value = Tensor::from_fn([n, ca + cb, h, w], |ni, ci, hi, wi| {
            if ci < ca {
                av.at(ni, ci, hi, wi)
            } else {
                bv.at(ni, ci - ca, hi, wi)
            }
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatC(a, b), rg))
    }

    /// 2-D convolution, weight `[Co, Ci, k, k]`, optional bias `[1, Co, 1, 1]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, ci, h, wd] = self.shape(x);
        let [co, wci, k, k2] = self.shape(w);
        if wci != ci || k != k2 {
            return Err(Error::shape("conv2d weight", [co, ci, k, k], self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, co, 1, 1] {
                return Err(Error::shape("conv2d bias", [1, co, 1, 1], self.shape(b)));
            }
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d input", [n, ci, k, k], [n, ci, h, wd]));
        }
        let geom = ConvGeom {
            ci,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let (rows, p) = (geom.rows(), geom.positions());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * co * p];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * p]
        };
        for ni in 0..n {
            let xs = &xv[ni * ci * h * wd..(ni + 1) * ci * h * wd];
            let src: &[f64] = if geom.is_pointwise() {
                xs
            } else {
                geom.im2col(xs, &mut cols);
                &cols
            };
            let ys = &mut out[ni * co * p..(ni + 1) * co * p];
            gemm(co, rows, p, wv, rows, 1, src, p, 1, 0.0, ys);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, plane) in ys.chunks_mut(p).enumerate() {
                    plane.iter_mut().for_each(|y| *y += bv[o]);
                }
            }
        }
        let value = Tensor::from_vec([n, co, geom.ho, geom.wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Depthwise `k×k` convolution with "same" padding, weight `[C, 1, k, k]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, c, h, wd] = self.shape(x);
        let [wc, one, k, k2] = self.shape(w);
        if wc != c || one != 1 || k != k2 || k % 2 == 0 {
            return Err(Error::shape(
                "depthwise_conv weight",
                [c, 1, 3, 3],
                self.shape(w),
            ));
        }
        let pad = (k / 2) as isize;
        let xv = self.value(x);
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data().to_vec());
        let value = Tensor::from_fn([n, c, h, wd], |ni, ci, hi, wi| {
            let mut acc = bv.as_ref().map_or(0.0, |b| b[ci]);
            for ky in 0..k {
                let iy = hi as isize + ky as isize - pad;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = wi as isize + kx as isize - pad;
                    if ix < 0 || ix as usize >= wd {
                        continue;
                    }
                    acc += wv[(ci * k + ky) * k + kx] * xv.at(ni, ci, iy as usize, ix as usize);
                }
            }
            acc
        });
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::DepthwiseConv { x, w, b }, rg))
    }

    /// Transposed 2×2 convolution with stride 2 (exact 2× upsampling),
    /// weight `[Ci, Co, 2, 2]`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, ci, h, wd] = self.shape(x);
        let [wci, co, k, k2] = self.shape(w);
        if wci != ci || k != 2 || k2 != 2 {
            return Err(Error::shape(
                "conv_transpose2 weight",
                [ci, co, 2, 2],
                self.shape(w),
            ));
        }
        let p = h * wd;
        let rows = co * 4;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; n * co * 4 * p];
        let mut z = vec![0.0; rows * p];
        let (ho, wo) = (2 * h, 2 * wd);
        for ni in 0..n {
            let xs = &xv[ni * ci * p..(ni + 1) * ci * p];
            gemm(rows, ci, p, wv, 1, rows, xs, p, 1, 0.0, &mut z);
            let ys = &mut out[ni * co * 4 * p..(ni + 1) * co * 4 * p];
            for o in 0..co {
                let bias = bv.as_ref().map_or(0.0, |b| b[o]);
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = (o * 2 + a) * 2 + bb;
                        for i in 0..h {
                            for j in 0..wd {
                                ys[(o * ho + 2 * i + a) * wo + 2 * j + bb] =
                                    z[row * p + i * wd + j] + bias;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec([n, co, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::ConvTranspose2 { x, w, b }, rg))
    }

    /// Layer normalization across channels at every pixel, with per-channel
    /// affine `gamma`, `beta` of shape `[1, C, 1, 1]`.
    pub fn layer_norm_c(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        for p in [gamma, beta] {
            if self.shape(p) != [1, c, 1, 1] {
                return Err(Error::shape(
                    "layer_norm_c affine",
                    [1, c, 1, 1],
                    self.shape(p),
                ));
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Tensor::zeros([n, c, h, w]);
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut inv_std = Vec::with_capacity(n * h * w);
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let mu = (0..c).map(|ci| xv.at(ni, ci, hi, wi)).sum::<f64>() / c as f64;
                    let var = (0..c)
                        .map(|ci| (xv.at(ni, ci, hi, wi) - mu).powi(2))
                        .sum::<f64>()
                        / c as f64;
                    let is = 1.0 / (var + LN_EPS).sqrt();
                    inv_std.push(is);
                    for ci in 0..c {
                        let xh = (xv.at(ni, ci, hi, wi) - mu) * is;
                        xhat.set(ni, ci, hi, wi, xh);
                        out.set(ni, ci, hi, wi, g[ci] * xh + bt[ci]);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNormC {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Transposed (channel) attention.
    ///
    /// Channels are split into `heads` groups of `d = C / heads`. Per batch
    /// element and head, with `Q`, `K`, `V` viewed as `d × (H·W)` matrices:
    ///
    /// ```text
    /// A = softmax_rows(Q Kᵀ / t_head)      (d × d, row-stochastic)
    /// Y = A V
    /// ```
    ///
    /// `temp` has shape `[1, heads, 1, 1]`.
    pub fn channel_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        temp: Var,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q);
        for other in [k, v] {
            if self.shape(other) != shape {
                return Err(Error::shape("channel_attention", shape, self.shape(other)));
            }
        }
        let [n, c, h, w] = shape;
        if heads == 0 || c % heads != 0 {
            return Err(Error::InvalidInput(format!(
                "{c} channels cannot be split into {heads} heads"
            )));
        }
        if self.shape(temp) != [1, heads, 1, 1] {
            return Err(Error::shape(
                "channel_attention temperature",
                [1, heads, 1, 1],
                self.shape(temp),
            ));
        }
        let d = c / heads;
        let p = h * w;
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let tv = self.value(temp).data();
        let mut scores = vec![0.0; n * heads * d * d];
        let mut probs = vec![0.0; n * heads * d * d];
        let mut out = vec![0.0; n * c * p];
        for ni in 0..n {
            for (hd, &t) in tv.iter().enumerate().take(heads) {
                let base = (ni * c + hd * d) * p;
                let blk = (ni * heads + hd) * d * d;
                let qh = &qv[base..base + d * p];
                let kh = &kv[base..base + d * p];
                let vh = &vv[base..base + d * p];
                let s = &mut scores[blk..blk + d * d];
                gemm(d, p, d, qh, p, 1, kh, 1, p, 0.0, s);
                let a = &mut probs[blk..blk + d * d];
                for i in 0..d {
                    let row = &s[i * d..(i + 1) * d];
                    let logits: Vec<f64> = row.iter().map(|x| x / t).collect();
                    if logits.iter().any(|l| !l.is_finite()) {
                        return Err(Error::NonFinite {
                            layer: "channel_attention logits".into(),
                        });
                    }
                    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (j, l) in logits.iter().enumerate() {
                        let e = (l - m).exp();
                        a[i * d + j] = e;
                        z += e;
                    }
                    a[i * d..(i + 1) * d].iter_mut().for_each(|e| *e /= z);
                }
                gemm(
                    d,
                    d,
                    p,
                    a,
                    d,
                    1,
                    vh,
                    p,
                    1,
                    0.0,
                    &mut out[base..base + d * p],
                );
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || self.rg(temp);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                temp,
                heads,
                scores,
                probs,
            },
            rg,
        ))
    }

    /// Row-stochastic attention matrices recorded by a
    /// [`Graph::channel_attention`] node, laid out `[N][heads][d][d]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
        if !nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from `root`, seeding it with a gradient of ones.
    pub fn backward(&mut self, root: Var) {
        let seed = Tensor::full(self.shape(root), 1.0);
        self.backward_with(root, seed);
    }

    /// Back-propagates `seed` (same shape as `root`) through the graph.
    pub fn backward_with(&mut self, root: Var, seed: Tensor) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return;
        }
        self.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            let contributions = backward_node(&self.nodes, i, &gy);
            for (var, g) in contributions {
                Self::accumulate(&mut self.grads, &self.nodes, var, g);
            }
            // Interior gradients are kept so callers can inspect them.
            self.grads[i] = Some(gy);
        }
    }
}

fn backward_node(nodes: &[Node], i: usize, gy: &Tensor) -> Vec<(Var, Tensor)> {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let y = &nodes[i].value;
    let mut out = Vec::new();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            out.push((*a, gy.clone()));
            out.push((*b, gy.clone()));
        }
        Op::Sub(a, b) => {
            out.push((*a, gy.clone()));
            out.push((*b, gy.scale(-1.0)));
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                out.push((*a, gy.zip_map(val(*b), |g, y| g * y)));
            }
            if rg(*b) {
                out.push((*b, gy.zip_map(val(*a), |g, x| g * x)));
            }
        }
        Op::AddBcastC(a, b) => {
            out.push((*a, gy.clone()));
            if rg(*b) {
                out.push((*b, gy.channel_mean().scale(gy.channels() as f64)));
            }
        }
        Op::MulBcastC(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                out.push((
                    *a,
                    Tensor::from_fn(gy.shape(), |n, c, h, w| {
                        gy.at(n, c, h, w) * bv.at(n, 0, h, w)
                    }),
                ));
            }
            if rg(*b) {
                let [n, c, h, w] = gy.shape();
                out.push((
                    *b,
                    Tensor::from_fn([n, 1, h, w], |ni, _, hi, wi| {
                        (0..c)
                            .map(|ci| gy.at(ni, ci, hi, wi) * av.at(ni, ci, hi, wi))
                            .sum()
                    }),
                ));
            }
        }
        Op::Scale(a, k) => out.push((*a, gy.scale(*k))),
        Op::Abs(a) => out.push((*a, gy.zip_map(val(*a), |g, x| g * sign(x)))),
        Op::Exp(a) => out.push((*a, gy.zip_map(y, |g, e| g * e))),
        Op::Square(a) => out.push((*a, gy.zip_map(val(*a), |g, x| 2.0 * g * x))),
        Op::Gelu(a) => out.push((*a, gy.zip_map(val(*a), |g, x| g * gelu_grad(x)))),
        Op::Clamp { x, lo, hi } => out.push((
            *x,
            gy.zip_map(val(*x), |g, v| if v > *lo && v < *hi { g } else { 0.0 }),
        )),
        Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), gy.item()))),
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            out.push((*a, Tensor::full(val(*a).shape(), gy.item() / n)));
        }
        Op::DiffW(a) => {
            let mut g = Tensor::zeros(val(*a).shape());
            let [n, c, h, w] = gy.shape();
            for ni in 0..n {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            let d = gy.at(ni, ci, hi, wi);
                            let o = g.offset(ni, ci, hi, wi);
                            g.data_mut()[o + 1] += d;
                            g.data_mut()[o] -= d;
                        }
                    }
                }
            }
            out.push((*a, g));
        }
        Op::DiffH(a) => {
            let mut g = Tensor::zeros(val(*a).shape());
            let [n, c, h, w] = gy.shape();
            for ni in 0..n {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            let d = gy.at(ni, ci, hi, wi);
                            let o0 = g.offset(ni, ci, hi, wi);
                            let o1 = g.offset(ni, ci, hi + 1, wi);
                            g.data_mut()[o1] += d;
                            g.data_mut()[o0] -= d;
                        }
                    }
                }
            }
            out.push((*a, g));
        }
        Op::MeanC(a) => {
            let shape = val(*a).shape();
            let c = shape[1] as f64;
            out.push((
                *a,
                Tensor::from_fn(shape, |n, _, h, w| gy.at(n, 0, h, w) / c),
            ));
        }
        Op::SliceC { x, start } => {
            let shape = val(*x).shape();
            let len = gy.channels();
            out.push((
                *x,
                Tensor::from_fn(shape, |n, c, h, w| {
                    if c >= *start && c < start + len {
                        gy.at(n, c - start, h, w)
                    } else {
                        0.0
                    }
                }),
            ));
        }
        Op::ConcatC(a, b) => {
            let ca = val(*a).channels();
            if rg(*a) {
                out.push((
                    *a,
                    Tensor::from_fn(val(*a).shape(), |n, c, h, w| gy.at(n, c, h, w)),
                ));
            }
            if rg(*b) {
                out.push((
                    *b,
                    Tensor::from_fn(val(*b).shape(), |n, c, h, w| gy.at(n, c + ca, h, w)),
                ));
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let xv = val(*x);
            let wv = val(*w);
            let [n, ci, h, wd] = xv.shape();
            let [co, _, k, _] = wv.shape();
            let geom = ConvGeom {
                ci,
                h,
                w: wd,
                k,
                stride: *stride,
                pad: *pad,
                ho: gy.height(),
                wo: gy.width(),
            };
            let (rows, p) = (geom.rows(), geom.positions());
            let mut dw = vec![0.0; co * rows];
            let mut dx = vec![0.0; xv.len()];
            let mut cols = vec![0.0; rows * p];
            let mut dcols = vec![0.0; rows * p];
            for ni in 0..n {
                let xs = &xv.data()[ni * ci * h * wd..(ni + 1) * ci * h * wd];
                let gs = &gy.data()[ni * co * p..(ni + 1) * co * p];
                if rg(*w) {
                    let src: &[f64] = if geom.is_pointwise() {
                        xs
                    } else {
                        geom.im2col(xs, &mut cols);
                        &cols
                    };
                    gemm(co, p, rows, gs, p, 1, src, 1, p, 1.0, &mut dw);
                }
                if rg(*x) {
                    let dxs = &mut dx[ni * ci * h * wd..(ni + 1) * ci * h * wd];
                    if geom.is_pointwise() {
                        gemm(rows, co, p, wv.data(), 1, rows, gs, p, 1, 0.0, dxs);
                    } else {
                        gemm(rows, co, p, wv.data(), 1, rows, gs, p, 1, 0.0, &mut dcols);
                        geom.col2im(&dcols, dxs);
                    }
                }
            }
            if rg(*x) {
                out.push((*x, Tensor::from_vec(xv.shape(), dx).expect("conv dx shape")));
            }
            if rg(*w) {
                out.push((*w, Tensor::from_vec(wv.shape(), dw).expect("conv dw shape")));
            }
            if let Some(b) = b {
                if rg(*b) {
                    out.push((*b, channel_sums(gy)));
                }
            }
        }
        Op::DepthwiseConv { x, w, b } => {
            let xv = val(*x);
            let wv = val(*w);
            let [n, c, h, wd] = xv.shape();
            let k = wv.height();
            let pad = (k / 2) as isize;
            let mut dx = Tensor::zeros(xv.shape());
            let mut dw = Tensor::zeros(wv.shape());
            for ni in 0..n {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..wd {
                            let g = gy.at(ni, ci, hi, wi);
                            for ky in 0..k {
                                let iy = hi as isize + ky as isize - pad;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = wi as isize + kx as isize - pad;
                                    if ix < 0 || ix as usize >= wd {
                                        continue;
                                    }
                                    let (iy, ix) = (iy as usize, ix as usize);
                                    let widx = (ci * k + ky) * k + kx;
                                    dw.data_mut()[widx] += g * xv.at(ni, ci, iy, ix);
                                    let o = dx.offset(ni, ci, iy, ix);
                                    dx.data_mut()[o] += g * wv.data()[widx];
                                }
                            }
                        }
                    }
                }
            }
            out.push((*x, dx));
            out.push((*w, dw));
            if let Some(b) = b {
                out.push((*b, channel_sums(gy)));
            }
        }
        Op::ConvTranspose2 { x, w, b } => {
            let xv = val(*x);
            let wv = val(*w);
            let [n, ci, h, wd] = xv.shape();
            let co = wv.channels();
            let p = h * wd;
            let rows = co * 4;
            let (ho, wo) = (2 * h, 2 * wd);
            let mut dz = vec![0.0; rows * p];
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; wv.len()];
            for ni in 0..n {
                let gs = &gy.data()[ni * co * 4 * p..(ni + 1) * co * 4 * p];
                for o in 0..co {
                    for a in 0..2 {
                        for bb in 0..2 {
                            let row = (o * 2 + a) * 2 + bb;
                            for i in 0..h {
                                for j in 0..wd {
                                    dz[row * p + i * wd + j] =
                                        gs[(o * ho + 2 * i + a) * wo + 2 * j + bb];
                                }
                            }
                        }
                    }
                }
                let xs = &xv.data()[ni * ci * p..(ni + 1) * ci * p];
                if rg(*x) {
                    gemm(
                        ci,
                        rows,
                        p,
                        wv.data(),
                        rows,
                        1,
                        &dz,
                        p,
                        1,
                        0.0,
                        &mut dx[ni * ci * p..(ni + 1) * ci * p],
                    );
                }
                if rg(*w) {
                    gemm(ci, p, rows, xs, p, 1, &dz, 1, p, 1.0, &mut dw);
                }
            }
            if rg(*x) {
                out.push((
                    *x,
                    Tensor::from_vec(xv.shape(), dx).expect("convT dx shape"),
                ));
            }
            if rg(*w) {
                out.push((
                    *w,
                    Tensor::from_vec(wv.shape(), dw).expect("convT dw shape"),
                ));
            }
            if let Some(b) = b {
                if rg(*b) {
                    out.push((*b, channel_sums(gy)));
                }
            }
        }
        Op::LayerNormC {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let [n, c, h, w] = gy.shape();
            let g = val(*gamma).data();
            let mut dx = Tensor::zeros(gy.shape());
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let cf = c as f64;
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let is = inv_std[(ni * h + hi) * w + wi];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for ci in 0..c {
                            let dy = gy.at(ni, ci, hi, wi);
                            let xh = xhat.at(ni, ci, hi, wi);
                            dgamma[ci] += dy * xh;
                            dbeta[ci] += dy;
                            let dxh = dy * g[ci];
                            sum_d += dxh;
                            sum_dx += dxh * xh;
                        }
                        for (ci, &gc) in g.iter().enumerate().take(c) {
                            let dxh = gy.at(ni, ci, hi, wi) * gc;
                            let xh = xhat.at(ni, ci, hi, wi);
                            dx.set(ni, ci, hi, wi, is / cf * (cf * dxh - sum_d - xh * sum_dx));
                        }
                    }
                }
            }
            out.push((*x, dx));
            out.push((
                *gamma,
                Tensor::from_vec([1, c, 1, 1], dgamma).expect("ln gamma"),
            ));
            out.push((
                *beta,
                Tensor::from_vec([1, c, 1, 1], dbeta).expect("ln beta"),
            ));
        }
        Op::Attention {
            q,
            k,
            v,
            temp,
            heads,
            scores,
            probs,
        } => {
            let [n, c, h, w] = gy.shape();
            let heads = *heads;
            let d = c / heads;
            let p = h * w;
            let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
            let tv = val(*temp).data();
            let mut dq = vec![0.0; n * c * p];
            let mut dk = vec![0.0; n * c * p];
            let mut dv = vec![0.0; n * c * p];
            let mut dt = vec![0.0; heads];
            let mut da = vec![0.0; d * d];
            let mut ds = vec![0.0; d * d];
            for ni in 0..n {
                for hd in 0..heads {
                    let base = (ni * c + hd * d) * p;
                    let blk = (ni * heads + hd) * d * d;
                    let gyh = &gy.data()[base..base + d * p];
                    let a = &probs[blk..blk + d * d];
                    let s = &scores[blk..blk + d * d];
                    let t = tv[hd];
                    gemm(
                        d,
                        p,
                        d,
                        gyh,
                        p,
                        1,
                        &vv[base..base + d * p],
                        1,
                        p,
                        0.0,
                        &mut da,
                    );
                    gemm(
                        d,
                        d,
                        p,
                        a,
                        1,
                        d,
                        gyh,
                        p,
                        1,
                        0.0,
                        &mut dv[base..base + d * p],
                    );
                    for i in 0..d {
                        let dot: f64 = (0..d).map(|j| da[i * d + j] * a[i * d + j]).sum();
                        for j in 0..d {
                            let dz = a[i * d + j] * (da[i * d + j] - dot);
                            ds[i * d + j] = dz / t;
                            dt[hd] -= dz * s[i * d + j] / (t * t);
                        }
                    }
                    gemm(
                        d,
                        d,
                        p,
                        &ds,
                        d,
                        1,
                        &kv[base..base + d * p],
                        p,
                        1,
                        0.0,
                        &mut dq[base..base + d * p],
                    );
                    gemm(
                        d,
                        d,
                        p,
                        &ds,
                        1,
                        d,
                        &qv[base..base + d * p],
                        p,
                        1,
                        0.0,
                        &mut dk[base..base + d * p],
                    );
                }
            }
            let shape = gy.shape();
            out.push((*q, Tensor::from_vec(shape, dq).expect("attn dq")));
            out.push((*k, Tensor::from_vec(shape, dk).expect("attn dk")));
            out.push((*v, Tensor::from_vec(shape, dv).expect("attn dv")));
            out.push((
                *temp,
                Tensor::from_vec([1, heads, 1, 1], dt).expect("attn dt"),
            ));
        }
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn channel_sums(gy: &Tensor) -> Tensor {
    let [n, c, h, w] = gy.shape();
    let mut sums = vec![0.0; c];
    for ni in 0..n {
        for (ci, s) in sums.iter_mut().enumerate() {
            let o = gy.offset(ni, ci, 0, 0);
            *s += gy.data()[o..o + h * w].iter().sum::<f64>();
        }
    }
    Tensor::from_vec([1, c, 1, 1], sums).expect("bias grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(f(x) ⊙ probe))/dx against central differences, where
    /// `probe` is a fixed random tensor so every output element matters.
    fn check_unary(x: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let build = |t: &Tensor| {
            let mut g = Graph::new();
            let xv = g.param(t.clone());
            let y = f(&mut g, xv);
            (g, xv, y)
        };
        let (g0, _, y0) = build(&x);
        let probe = random(g0.shape(y0), 99);
        let (mut g, xv, y) = build(&x);
        let pv = g.input(probe.clone());
        let prod = g.mul(y, pv).unwrap();
        let loss = g.sum(prod);
        g.backward(loss);
        let analytic = g.grad(xv).unwrap().clone();
        let numeric = central_difference(
            |t| {
                let (g, _, y) = build(t);
                g.value(y).zip_map(&probe, |a, b| a * b).sum()
            },
            &x,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn elementwise_grads() {
        let x = random([2, 3, 4, 5], 1);
        check_unary(x.clone(), |g, v| g.gelu(v));
        check_unary(x.clone(), |g, v| g.exp(v));
        check_unary(x.clone(), |g, v| g.square(v));
        check_unary(x.clone(), |g, v| g.scale(v, -2.5));
        check_unary(x.clone(), |g, v| g.diff_w(v));
        check_unary(x.clone(), |g, v| g.diff_h(v));
        check_unary(x.clone(), |g, v| g.mean_c(v));
        check_unary(x.clone(), |g, v| g.slice_c(v, 1, 2).unwrap());
        check_unary(x.clone(), |g, v| {
            let a = g.slice_c(v, 0, 1).unwrap();
            g.mul_bcast_c(v, a).unwrap()
        });
        check_unary(x.clone(), |g, v| {
            let a = g.slice_c(v, 2, 1).unwrap();
            g.add_bcast_c(v, a).unwrap()
        });
        check_unary(x, |g, v| {
            let a = g.exp(v);
            g.concat_c(v, a).unwrap()
        });
    }

    #[test]
    fn conv_grads() {
        let x = random([2, 3, 6, 5], 2);
        let w = random([4, 3, 3, 3], 3);
        let b = random([1, 4, 1, 1], 4);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 3)] {
            let w = if k == 3 {
                w.clone()
            } else {
                random([4, 3, k, k], 5)
            };
            check_unary(x.clone(), |g, v| {
                let wv = g.input(w.clone());
                let bv = g.input(b.clone());
                g.conv2d(v, wv, Some(bv), stride, pad).unwrap()
            });
            check_unary(w.clone(), |g, wv| {
                let xv = g.input(x.clone());
                g.conv2d(xv, wv, None, stride, pad).unwrap()
            });
        }
        check_unary(b.clone(), |g, bv| {
            let xv = g.input(x.clone());
            let wv = g.input(w.clone());
            g.conv2d(xv, wv, Some(bv), 1, 1).unwrap()
        });
    }

    #[test]
    fn depthwise_and_transpose_grads() {
        let x = random([2, 3, 4, 5], 6);
        let w = random([3, 1, 3, 3], 7);
        let b = random([1, 3, 1, 1], 8);
        check_unary(x.clone(), |g, v| {
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            g.depthwise_conv(v, wv, Some(bv)).unwrap()
        });
        check_unary(w.clone(), |g, wv| {
            let xv = g.input(x.clone());
            g.depthwise_conv(xv, wv, None).unwrap()
        });
        let wt = random([3, 2, 2, 2], 9);
        let bt = random([1, 2, 1, 1], 10);
        check_unary(x.clone(), |g, v| {
            let wv = g.input(wt.clone());
            let bv = g.input(bt.clone());
            g.conv_transpose2(v, wv, Some(bv)).unwrap()
        });
        check_unary(wt, |g, wv| {
            let xv = g.input(x.clone());
            g.conv_transpose2(xv, wv, None).unwrap()
        });
        check_unary(bt, |g, bv| {
            let xv = g.input(x.clone());
            let wv = g.input(random([3, 2, 2, 2], 9));
            g.conv_transpose2(xv, wv, Some(bv)).unwrap()
        });
    }

    #[test]
    fn layer_norm_grads() {
        let x = random([2, 4, 3, 3], 11);
        let gamma = random([1, 4, 1, 1], 12);
        let beta = random([1, 4, 1, 1], 13);
        check_unary(x.clone(), |g, v| {
            let gv = g.input(gamma.clone());
            let bv = g.input(beta.clone());
            g.layer_norm_c(v, gv, bv).unwrap()
        });
        check_unary(gamma.clone(), |g, gv| {
            let xv = g.input(x.clone());
            let bv = g.input(beta.clone());
            g.layer_norm_c(xv, gv, bv).unwrap()
        });
    }

    #[test]
    fn attention_grads() {
        let q = random([2, 4, 3, 3], 14);
        let k = random([2, 4, 3, 3], 15);
        let v = random([2, 4, 3, 3], 16);
        let t = Tensor::from_vec([1, 2, 1, 1], vec![1.3, 0.7]).unwrap();
        let run = |g: &mut Graph, qv: Var, kv: Var, vv: Var, tv: Var| {
            g.channel_attention(qv, kv, vv, tv, 2).unwrap()
        };
        check_unary(q.clone(), |g, qv| {
            let (kv, vv, tv) = (g.input(k.clone()), g.input(v.clone()), g.input(t.clone()));
            run(g, qv, kv, vv, tv)
        });
        check_unary(k.clone(), |g, kv| {
            let (qv, vv, tv) = (g.input(q.clone()), g.input(v.clone()), g.input(t.clone()));
            run(g, qv, kv, vv, tv)
        });
        check_unary(v.clone(), |g, vv| {
            let (qv, kv, tv) = (g.input(q.clone()), g.input(k.clone()), g.input(t.clone()));
            run(g, qv, kv, vv, tv)
        });
        check_unary(t.clone(), |g, tv| {
            let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
            run(g, qv, kv, vv, tv)
        });
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut g = Graph::new();
        let q = g.input(random([1, 6, 4, 4], 17));
        let k = g.input(random([1, 6, 4, 4], 18));
        let v = g.input(random([1, 6, 4, 4], 19));
        let t = g.input(Tensor::full([1, 3, 1, 1], 0.5));
        let y = g.channel_attention(q, k, v, t, 3).unwrap();
        let probs = g.attention_probs(y).unwrap();
        assert_eq!(probs.len(), 3 * 2 * 2);
        for row in probs.chunks(2) {
            assert!(row.iter().all(|p| *p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_branches_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::full([1, 1, 2, 2], 2.0));
        let b = g.param(Tensor::full([1, 1, 2, 2], 3.0));
        let ea = g.exp(a);
        assert!(!g.requires_grad(ea));
        let y = g.mul(ea, b).unwrap();
        let s = g.sum(y);
        g.backward(s);
        assert!(g.grad(a).is_none());
        assert!(g.grad(ea).is_none());
        let gb = g.grad(b).unwrap();
        assert!(gb.data().iter().all(|v| (*v - 2f64.exp()).abs() < 1e-12));
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec([1, 1, 1, 3], vec![-0.5, 0.5, 1.5]).unwrap());
        let y = g.clamp(x, 0.0, 1.0);
        let s = g.sum(y);
        g.backward(s);
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros([1, 2, 3, 3]));
        let b = g.input(Tensor::zeros([1, 3, 3, 3]));
        assert!(g.add(a, b).is_err());
        let w = g.input(Tensor::zeros([4, 3, 3, 3]));
        assert!(g.conv2d(a, w, None, 1, 1).is_err());
        let t = g.input(Tensor::full([1, 1, 1, 1], 1.0));
        assert!(g.channel_attention(a, a, a, t, 3).is_err());
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let mut g = Graph::new();
        let q = g.input(Tensor::full([1, 2, 2, 2], 1.0));
        let t = g.input(Tensor::full([1, 1, 1, 1], 0.0));
        assert!(matches!(
            g.channel_attention(q, q, q, t, 1),
            Err(Error::NonFinite { .. })
        ));
    }
}
