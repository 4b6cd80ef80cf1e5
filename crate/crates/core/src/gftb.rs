//! Guidance fusion transformer block.
//!
//! Channel (transposed) attention over the normalized input, plus a second
//! attention whose query comes from a single-channel guidance map. The two
//! outputs are summed, added back to the input, and followed by a gated
//! feed-forward with a depthwise positional term:
//!
//! ```text
//! x̂   = LN(f_in)
//! Y_m = attn(W^Q x̂, W^K x̂, W^V x̂; α_m)
//! Y_G = attn(W^G proj(g), W^K x̂, W^V x̂; α_G)
//! h   = f_in + Y_m + Y_G
//! z   = FFN(LN(h));  z = z + dwconv(z)
//! out = h + z
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Builder, Conv, ConvInit, Depthwise, LayerNorm, ParamId, ParamStore};
use crate::tensor::Tensor;

/// How the guidance map enters the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceFusion {
    /// Separate guidance-query attention, summed with self-attention.
    CrossAttention,
    /// Self-attention only; the guidance map is ignored.
    None,
    /// Projected guidance multiplies the values.
    ScaleValue,
    /// Projected guidance multiplies the normalized input.
    ScaleInput,
}

impl std::str::FromStr for GuidanceFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_attention" => Ok(Self::CrossAttention),
            "none" => Ok(Self::None),
            "scale_value" => Ok(Self::ScaleValue),
            "scale_input" => Ok(Self::ScaleInput),
            _ => Err(Error::Config(format!(
                "unknown guidance fusion `{s}`; expected cross_attention, none, scale_value or scale_input"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GftbConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub fusion: GuidanceFusion,
}

impl GftbConfig {
    pub fn new(channels: usize, heads: usize, fusion: GuidanceFusion) -> Self {
        Self {
            channels,
            heads,
            ffn_expansion: 2,
            fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} channels cannot be split into {} heads",
                self.channels, self.heads
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("ffn_expansion must be positive".into()));
        }
        Ok(())
    }

    /// Initial attention temperature, `sqrt(channels / heads)`.
    pub fn initial_temperature(&self) -> f64 {
        ((self.channels / self.heads) as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
struct GuideParams {
    proj: Conv,
    query: Option<Conv>,
    temp: Option<ParamId>,
}

/// Parameter handles of one block inside a larger [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gftb {
    cfg: GftbConfig,
    norm1: LayerNorm,
    q: Conv,
    k: Conv,
    v: Conv,
    temp: ParamId,
    guide: Option<GuideParams>,
    norm2: LayerNorm,
    ffn_in: Conv,
    ffn_out: Conv,
    pos: Depthwise,
}

/// Intermediate values of one block evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GftbVars {
    pub out: Var,
    pub y_m: Var,
    pub y_g: Option<Var>,
}

impl Gftb {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, cfg: GftbConfig) -> Self {
        let c = cfg.channels;
        let hidden = c * cfg.ffn_expansion;
        let temp0 = Tensor::full([1, cfg.heads, 1, 1], cfg.initial_temperature());
        let norm1 = b.layer_norm("norm1", c);
        let q = b.conv("q", c, c, 1, ConvInit::Normal);
        let k = b.conv("k", c, c, 1, ConvInit::Normal);
        let v = b.conv("v", c, c, 1, ConvInit::Normal);
        let temp = b.tensor("temperature", temp0.clone());
        let guide = match cfg.fusion {
            GuidanceFusion::None => None,
            GuidanceFusion::CrossAttention => Some(GuideParams {
                proj: b.conv("guide_proj", 1, c, 3, ConvInit::Normal),
                query: Some(b.conv("guide_query", c, c, 1, ConvInit::Normal)),
                temp: Some(b.tensor("guide_temperature", temp0)),
            }),
            GuidanceFusion::ScaleValue | GuidanceFusion::ScaleInput => Some(GuideParams {
                proj: b.conv("guide_proj", 1, c, 3, ConvInit::Normal),
                query: None,
                temp: None,
            }),
        };
        let norm2 = b.layer_norm("norm2", c);
        let ffn_in = b.conv("ffn_in", c, 2 * hidden, 1, ConvInit::Normal);
        let ffn_out = b.conv("ffn_out", hidden, c, 1, ConvInit::Normal);
        let pos = b.depthwise("pos", c, 3);
        Self {
            cfg,
            norm1,
            q,
            k,
            v,
            temp,
            guide,
            norm2,
            ffn_in,
            ffn_out,
            pos,
        }
    }

    pub fn config(&self) -> GftbConfig {
        self.cfg
    }

    /// Handles of the per-head temperatures (self, then guidance if present).
    pub fn temperatures(&self) -> Vec<ParamId> {
        let mut t = vec![self.temp];
        if let Some(gt) = self.guide.as_ref().and_then(|g| g.temp) {
            t.push(gt);
        }
        t
    }

    /// Evaluates the block on `x` (`[N, C, H, W]`). `guide` is the
    /// single-channel map at this resolution; passing `None` disables the
    /// guidance path, which for cross-attention means `Y_G = 0`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &crate::params::Bound,
        x: Var,
        guide: Option<Var>,
    ) -> Result<GftbVars> {
        let [n, c, h, w] = g.shape(x);
        if c != self.cfg.channels {
            return Err(Error::shape("gftb input channels", self.cfg.channels, c));
        }
        let gfeat = match (&self.guide, guide) {
            (Some(gp), Some(gv)) => {
                if g.shape(gv) != [n, 1, h, w] {
                    return Err(Error::shape("gftb guidance", [n, 1, h, w], g.shape(gv)));
                }
                Some((gp, gp.proj.forward(g, p, gv)?))
            }
            _ => None,
        };
        let heads = self.cfg.heads;
        let mut xn = self.norm1.forward(g, p, x)?;
        if let Some((_, gf)) = gfeat {
            if self.cfg.fusion == GuidanceFusion::ScaleInput {
                xn = g.mul(xn, gf)?;
            }
        }
        let q = self.q.forward(g, p, xn)?;
        let k = self.k.forward(g, p, xn)?;
        let mut v = self.v.forward(g, p, xn)?;
        if let Some((_, gf)) = gfeat {
            if self.cfg.fusion == GuidanceFusion::ScaleValue {
                v = g.mul(v, gf)?;
            }
        }
        let y_m = g.channel_attention(q, k, v, p.var(self.temp), heads)?;
        let y_g = match gfeat {
            Some((gp, gf)) => match (gp.query, gp.temp) {
                (Some(wq), Some(t)) => {
                    let qg = wq.forward(g, p, gf)?;
                    Some(g.channel_attention(qg, k, v, p.var(t), heads)?)
                }
                _ => None,
            },
            None => None,
        };
        let y = match y_g {
            Some(yg) => g.add(y_m, yg)?,
            None => y_m,
        };
        let hres = g.add(x, y)?;
        let hn = self.norm2.forward(g, p, hres)?;
        let u = self.ffn_in.forward(g, p, hn)?;
        let hidden = self.cfg.channels * self.cfg.ffn_expansion;
        let a = g.slice_c(u, 0, hidden)?;
        let bgate = g.slice_c(u, hidden, hidden)?;
        let a = g.gelu(a);
        let gated = g.mul(a, bgate)?;
        let z = self.ffn_out.forward(g, p, gated)?;
        let pz = self.pos.forward(g, p, z)?;
        let z = g.add(z, pz)?;
        let out = g.add(hres, z)?;
        g.ensure_finite(out, "gftb")?;
        Ok(GftbVars { out, y_m, y_g })
    }
}

/// A standalone block with its own parameters.
#[derive(Clone, Debug)]
pub struct GftbWeights {
    pub params: ParamStore,
    block: Gftb,
}

/// Tensors produced by [`gftb_trace`].
#[derive(Clone, Debug)]
pub struct GftbTrace {
    pub out: Tensor,
    pub y_m: Tensor,
    pub y_g: Option<Tensor>,
    /// Self-attention probabilities, `[N][heads][d][d]`.
    pub attn_m: Vec<f64>,
    /// Guidance attention probabilities, same layout.
    pub attn_g: Option<Vec<f64>>,
}

impl GftbWeights {
    pub fn init<R: Rng>(cfg: GftbConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let block = Gftb::build(&mut Builder::new(&mut params, rng), cfg);
        Ok(Self { params, block })
    }

    pub fn config(&self) -> GftbConfig {
        self.block.cfg
    }

    pub fn block(&self) -> &Gftb {
        &self.block
    }
}

/// Runs one block on `f_in` with optional guidance `[N, 1, H, W]`.
pub fn gftb_forward(f_in: &Tensor, guide: Option<&Tensor>, w: &GftbWeights) -> Result<Tensor> {
    Ok(gftb_trace(f_in, guide, w)?.out)
}

/// Like [`gftb_forward`] but also returns the attention outputs and
/// probability matrices.
pub fn gftb_trace(f_in: &Tensor, guide: Option<&Tensor>, w: &GftbWeights) -> Result<GftbTrace> {
    let mut g = Graph::new();
    let p = w.params.bind(&mut g, false);
    let x = g.input(f_in.clone());
    let gv = guide.map(|t| g.input(t.clone()));
    let vars = w.block.forward(&mut g, &p, x, gv)?;
    let probs = |v: Var| {
        g.attention_probs(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_default()
    };
    Ok(GftbTrace {
        out: g.value(vars.out).clone(),
        y_m: g.value(vars.y_m).clone(),
        y_g: vars.y_g.map(|v| g.value(v).clone()),
        attn_m: probs(vars.y_m),
        attn_g: vars.y_g.map(probs),
    })
}
