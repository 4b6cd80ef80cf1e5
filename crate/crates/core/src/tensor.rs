//! Dense `N×C×H×W` tensors of `f64`.
//!
//! Everything in the crate (images, latents, weights, scalars) is stored in
//! this one layout. Images use `N = 1`; scalars are `[1, 1, 1, 1]`.

use std::fmt;

use crate::error::{Error, Result};

/// Shape in `[batch, channels, height, width]` order.
pub type Shape = [usize; 4];

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape("Tensor::from_vec", expected, data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f(ni, ci, hi, wi));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let o = self.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// Value of a `[1, 1, 1, 1]` tensor (or the first element of any tensor).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("Tensor::reshape", shape, self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// One batch element as a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let [_, c, h, w] = self.shape;
        let plane = c * h * w;
        Self {
            shape: [1, c, h, w],
            data: self.data[n * plane..(n + 1) * plane].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape("Tensor::stack", first.shape, t.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Per-pixel maximum over channels, `[N, 1, H, W]`.
    pub fn channel_max(&self) -> Self {
        let [n, c, h, w] = self.shape;
        Self::from_fn([n, 1, h, w], |ni, _, hi, wi| {
            (0..c)
                .map(|ci| self.at(ni, ci, hi, wi))
                .fold(f64::NEG_INFINITY, f64::max)
        })
    }

    /// Per-pixel mean over channels, `[N, 1, H, W]`.
    pub fn channel_mean(&self) -> Self {
        let [n, c, h, w] = self.shape;
        Self::from_fn([n, 1, h, w], |ni, _, hi, wi| {
            (0..c).map(|ci| self.at(ni, ci, hi, wi)).sum::<f64>() / c as f64
        })
    }

    /// Spatial window `[top, top + height) × [left, left + width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if top + height > h || left + width > w {
            return Err(Error::InvalidInput(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {h}x{w}"
            )));
        }
        Ok(Self::from_fn([n, c, height, width], |ni, ci, hi, wi| {
            self.at(ni, ci, top + hi, left + wi)
        }))
    }

    /// Replicate-pads the bottom and right edges.
    pub fn pad_replicate(&self, bottom: usize, right: usize) -> Self {
        let [n, c, h, w] = self.shape;
        Self::from_fn([n, c, h + bottom, w + right], |ni, ci, hi, wi| {
            self.at(ni, ci, hi.min(h - 1), wi.min(w - 1))
        })
    }

    /// 2×2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&self) -> Self {
        let [n, c, h, w] = self.shape;
        Self::from_fn([n, c, h / 2, w / 2], |ni, ci, hi, wi| {
            let (y, x) = (2 * hi, 2 * wi);
            0.25 * (self.at(ni, ci, y, x)
                + self.at(ni, ci, y, x + 1)
                + self.at(ni, ci, y + 1, x)
                + self.at(ni, ci, y + 1, x + 1))
        })
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2(&self) -> Self {
        let [n, c, h, w] = self.shape;
        Self::from_fn([n, c, h / 2, w / 2], |ni, ci, hi, wi| {
            let (y, x) = (2 * hi, 2 * wi);
            self.at(ni, ci, y, x)
                .max(self.at(ni, ci, y, x + 1))
                .max(self.at(ni, ci, y + 1, x))
                .max(self.at(ni, ci, y + 1, x + 1))
        })
    }

    /// Little-endian bit pattern of every element, for checksums and
    /// bit-exact comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}
