//! Named parameter storage, initialization and the small layer helpers the
//! networks are assembled from.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Standard deviation of the truncated-normal projection initializer.
pub const INIT_STD: f64 = 0.02;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered map from parameter names to tensors. Insertion order is the
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let (idx, _) = self.tensors.insert_full(name.into(), t);
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.values_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Replaces every tensor with the same-named tensor from `other`. Both
    /// stores must hold exactly the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in self.tensors.iter_mut() {
            let src = other
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Creates one graph leaf per parameter, in store order. Frozen stores
    /// are bound as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .values()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients of every parameter after a backward pass; parameters that
    /// did not influence the loss get zeros.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        self.tensors
            .values()
            .zip(&bound.vars)
            .map(|(t, v)| {
                g.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// Graph variables for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Truncated normal (±2σ) with mean 0.
pub fn trunc_normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_, _, _, _| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Registers parameters under a common name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> Builder<'_, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn tensor(&mut self, leaf: &str, t: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.insert(name, t)
    }

    pub fn normal(&mut self, leaf: &str, shape: Shape) -> ParamId {
        let t = trunc_normal(shape, INIT_STD, self.rng);
        self.tensor(leaf, t)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, init: ConvInit) -> Conv {
        let mut s = self.scope(name);
        let w = match init {
            ConvInit::Zero => s.tensor("weight", Tensor::zeros([cout, cin, k, k])),
            _ => s.normal("weight", [cout, cin, k, k]),
        };
        let bias = match init {
            ConvInit::NormalBias(b) => b,
            _ => 0.0,
        };
        let b = s.tensor("bias", Tensor::full([1, cout, 1, 1], bias));
        Conv {
            w,
            b,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn depthwise(&mut self, name: &str, channels: usize, k: usize) -> Depthwise {
        let mut s = self.scope(name);
        let w = s.normal("weight", [channels, 1, k, k]);
        let b = s.tensor("bias", Tensor::zeros([1, channels, 1, 1]));
        Depthwise { w, b }
    }

    pub fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize) -> ConvTranspose {
        let mut s = self.scope(name);
        let w = s.normal("weight", [cin, cout, 2, 2]);
        let b = s.tensor("bias", Tensor::zeros([1, cout, 1, 1]));
        ConvTranspose { w, b }
    }

    pub fn layer_norm(&mut self, name: &str, channels: usize) -> LayerNorm {
        let mut s = self.scope(name);
        let gamma = s.tensor("weight", Tensor::full([1, channels, 1, 1], 1.0));
        let beta = s.tensor("bias", Tensor::zeros([1, channels, 1, 1]));
        LayerNorm { gamma, beta }
    }
}

/// How a convolution's parameters start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConvInit {
    /// Truncated-normal weight, zero bias.
    Normal,
    /// Truncated-normal weight, constant bias.
    NormalBias(f64),
    /// All-zero weight and bias.
    Zero,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn with_stride(mut self, stride: usize, pad: usize) -> Self {
        self.stride = stride;
        self.pad = pad;
        self
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Depthwise {
    pub w: ParamId,
    pub b: ParamId,
}

impl Depthwise {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.depthwise_conv(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvTranspose {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm_c(x, p.var(self.gamma), p.var(self.beta))
    }
}
