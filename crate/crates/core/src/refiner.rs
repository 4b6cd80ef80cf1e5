//! Three-scale U-shaped component refiner built from guidance fusion
//! transformer blocks, and the end-to-end enhancement pipeline.
//!
//! Each branch predicts an additive correction for its latent component:
//! `out = x + tail(U(x, g))`, with the tail initialized to zero so an
//! untrained refiner is the identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decomposer::{decompose, reconstruct, DecomposerWeights, LatentComponents};
use crate::error::{Error, Result};
use crate::gftb::{Gftb, GftbConfig, GuidanceFusion};
use crate::imaging::{
    guidance_max, guidance_mean, illumination_prior, log_forward, log_inverse, GuidanceKind,
    GuidanceMap, LogImage, PixelImage,
};
use crate::params::{Bound, Builder, Conv, ConvInit, ConvTranspose, ParamStore};
use crate::strategy::Strategy;
use crate::tensor::Tensor;

pub use crate::gftb::{gftb_forward, gftb_trace, GftbTrace, GftbWeights};

/// Spatial sizes must be divisible by this for the two 2× downsamplings.
pub const SIZE_MULTIPLE: usize = 4;

/// Which component a refiner branch handles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchTag {
    R,
    L,
}

impl BranchTag {
    /// Guidance expected by this branch: channel mean for reflectance,
    /// channel max for illumination.
    pub fn guidance_kind(self) -> GuidanceKind {
        match self {
            BranchTag::R => GuidanceKind::Mean,
            BranchTag::L => GuidanceKind::Max,
        }
    }

    /// Pools the guidance map to the next coarser scale; average for
    /// reflectance, max for illumination.
    pub fn pool(self, t: &Tensor) -> Tensor {
        match self {
            BranchTag::R => t.avg_pool2(),
            BranchTag::L => t.max_pool2(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BranchTag::R => "r",
            BranchTag::L => "l",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub fusion: GuidanceFusion,
    /// Blocks at the outer, middle and bottleneck scale. The decoder mirrors
    /// the first two.
    pub depths: [usize; 3],
}

impl RefinerConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            heads: 1,
            ffn_expansion: 2,
            fusion: GuidanceFusion::CrossAttention,
            depths: [1, 2, 2],
        }
    }

    fn block(&self, channels: usize) -> GftbConfig {
        GftbConfig {
            channels,
            heads: self.heads,
            ffn_expansion: self.ffn_expansion,
            fusion: self.fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in [self.channels, 2 * self.channels, 4 * self.channels] {
            self.block(c).validate()?;
        }
        Ok(())
    }
}

/// Parameter handles of one U-shaped branch.
#[derive(Clone, Debug)]
pub struct RefinerArch {
    cfg: RefinerConfig,
    tag: BranchTag,
    enc1: Vec<Gftb>,
    down1: Conv,
    enc2: Vec<Gftb>,
    down2: Conv,
    bottleneck: Vec<Gftb>,
    up2: ConvTranspose,
    fuse2: Conv,
    dec2: Vec<Gftb>,
    up1: ConvTranspose,
    fuse1: Conv,
    dec1: Vec<Gftb>,
    tail: Conv,
}

fn stage<R: Rng>(b: &mut Builder<'_, R>, name: &str, n: usize, cfg: GftbConfig) -> Vec<Gftb> {
    let mut s = b.scope(name);
    (0..n)
        .map(|i| Gftb::build(&mut s.scope(&format!("block{i}")), cfg))
        .collect()
}

fn run_stage(g: &mut Graph, p: &Bound, blocks: &[Gftb], mut x: Var, guide: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, p, x, Some(guide))?.out;
    }
    Ok(x)
}

impl RefinerArch {
    fn build<R: Rng>(b: &mut Builder<'_, R>, cfg: RefinerConfig, tag: BranchTag) -> Self {
        let c = cfg.channels;
        let [d1, d2, d3] = cfg.depths;
        let enc1 = stage(b, "enc1", d1, cfg.block(c));
        let down1 = b
            .conv("down1", c, 2 * c, 4, ConvInit::Normal)
            .with_stride(2, 1);
        let enc2 = stage(b, "enc2", d2, cfg.block(2 * c));
        let down2 = b
            .conv("down2", 2 * c, 4 * c, 4, ConvInit::Normal)
            .with_stride(2, 1);
        let bottleneck = stage(b, "bottleneck", d3, cfg.block(4 * c));
        let up2 = b.conv_transpose("up2", 4 * c, 2 * c);
        let fuse2 = b.conv("fuse2", 4 * c, 2 * c, 1, ConvInit::Normal);
        let dec2 = stage(b, "dec2", d2, cfg.block(2 * c));
        let up1 = b.conv_transpose("up1", 2 * c, c);
        let fuse1 = b.conv("fuse1", 2 * c, c, 1, ConvInit::Normal);
        let dec1 = stage(b, "dec1", d1, cfg.block(c));
        let tail = b.conv("tail", c, c, 3, ConvInit::Zero);
        Self {
            cfg,
            tag,
            enc1,
            down1,
            enc2,
            down2,
            bottleneck,
            up2,
            fuse2,
            dec2,
            up1,
            fuse1,
            dec1,
            tail,
        }
    }

    pub fn tag(&self) -> BranchTag {
        self.tag
    }

    /// All blocks of the branch, outer to inner to outer.
    pub fn blocks(&self) -> impl Iterator<Item = &Gftb> {
        self.enc1
            .iter()
            .chain(&self.enc2)
            .chain(&self.bottleneck)
            .chain(&self.dec2)
            .chain(&self.dec1)
    }

    /// Refines `x` (`[N, C, H, W]`, `H` and `W` multiples of
    /// [`SIZE_MULTIPLE`]) under the full-resolution guidance `guide`
    /// (`[N, 1, H, W]`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, guide: &Tensor) -> Result<Var> {
        let [n, c, h, w] = g.shape(x);
        if c != self.cfg.channels {
            return Err(Error::shape("refiner input channels", self.cfg.channels, c));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::InvalidInput(format!(
                "refiner input {h}×{w} is not a multiple of {SIZE_MULTIPLE}"
            )));
        }
        if guide.shape() != [n, 1, h, w] {
            return Err(Error::shape(
                "refiner guidance",
                [n, 1, h, w],
                guide.shape(),
            ));
        }
        let g1 = self.tag.pool(guide);
        let g2 = self.tag.pool(&g1);
        let gv0 = g.input(guide.clone());
        let gv1 = g.input(g1);
        let gv2 = g.input(g2);

        let e1 = run_stage(g, p, &self.enc1, x, gv0)?;
        let d = self.down1.forward(g, p, e1)?;
        let e2 = run_stage(g, p, &self.enc2, d, gv1)?;
        let d = self.down2.forward(g, p, e2)?;
        let b = run_stage(g, p, &self.bottleneck, d, gv2)?;
        let u = self.up2.forward(g, p, b)?;
        let u = g.concat_c(u, e2)?;
        let u = self.fuse2.forward(g, p, u)?;
        let d2 = run_stage(g, p, &self.dec2, u, gv1)?;
        let u = self.up1.forward(g, p, d2)?;
        let u = g.concat_c(u, e1)?;
        let u = self.fuse1.forward(g, p, u)?;
        let d1 = run_stage(g, p, &self.dec1, u, gv0)?;
        let delta = self.tail.forward(g, p, d1)?;
        let out = g.add(x, delta)?;
        g.ensure_finite(out, &format!("refiner.{}", self.tag.as_str()))?;
        Ok(out)
    }
}

/// Parameters of one refiner branch.
#[derive(Clone, Debug)]
pub struct RefinerBranch {
    pub params: ParamStore,
    arch: RefinerArch,
}

impl RefinerBranch {
    pub fn init<R: Rng>(cfg: RefinerConfig, tag: BranchTag, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let arch = RefinerArch::build(&mut Builder::new(&mut params, rng), cfg, tag);
        Ok(Self { params, arch })
    }

    pub fn from_params(cfg: RefinerConfig, tag: BranchTag, params: &ParamStore) -> Result<Self> {
        // Initial values are overwritten by the load below.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut b = Self::init(cfg, tag, &mut rng)?;
        b.params.load_from(params)?;
        Ok(b)
    }

    pub fn config(&self) -> RefinerConfig {
        self.arch.cfg
    }

    pub fn tag(&self) -> BranchTag {
        self.arch.tag
    }

    pub fn arch(&self) -> &RefinerArch {
        &self.arch
    }
}

/// The reflectance and illumination branches; they share no parameters.
#[derive(Clone, Debug)]
pub struct RefinerWeights {
    pub r: RefinerBranch,
    pub l: RefinerBranch,
}

impl RefinerWeights {
    pub fn init<R: Rng>(cfg: RefinerConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            r: RefinerBranch::init(cfg, BranchTag::R, rng)?,
            l: RefinerBranch::init(cfg, BranchTag::L, rng)?,
        })
    }
}

fn padding(n: usize) -> usize {
    (SIZE_MULTIPLE - n % SIZE_MULTIPLE) % SIZE_MULTIPLE
}

/// Refines one latent component of any spatial size. Inputs are padded by
/// edge replication to a multiple of [`SIZE_MULTIPLE`] and the result is
/// cropped back.
pub fn refine_component(x: &Tensor, guide: &GuidanceMap, w: &RefinerBranch) -> Result<Tensor> {
    if guide.kind != w.tag().guidance_kind() {
        return Err(Error::InvalidInput(format!(
            "{:?} branch expects {:?} guidance, got {:?}",
            w.tag(),
            w.tag().guidance_kind(),
            guide.kind
        )));
    }
    let [n, _, h, wd] = x.shape();
    if guide.data.shape() != [n, 1, h, wd] {
        return Err(Error::shape(
            "refine_component guidance",
            [n, 1, h, wd],
            guide.data.shape(),
        ));
    }
    let (pb, pr) = (padding(h), padding(wd));
    let mut g = Graph::new();
    let p = w.params.bind(&mut g, false);
    let xv = g.input(x.pad_replicate(pb, pr));
    let out = w
        .arch
        .forward(&mut g, &p, xv, &guide.data.pad_replicate(pb, pr))?;
    g.value(out).crop(0, 0, h, wd)
}

/// Full enhancement: log transform, decomposition, per-component
/// refinement, reconstruction and inverse log. `dw` is only read.
pub fn enhance(
    low: &PixelImage,
    dw: &DecomposerWeights,
    rw: &RefinerWeights,
) -> Result<PixelImage> {
    if dw.strategy() != Strategy::Full {
        return Err(Error::StrategyMismatch(format!(
            "enhancement requires a full-strategy decomposer, got {}",
            dw.strategy()
        )));
    }
    let s = log_forward(low);
    let c = decompose(s.tensor(), &illumination_prior(&s), dw)?;
    let refined = LatentComponents {
        r: refine_component(&c.r, &guidance_mean(&s), &rw.r)?,
        l: refine_component(&c.l, &guidance_max(&s), &rw.l)?,
        strategy: c.strategy,
    };
    let out = reconstruct(&refined, dw)?;
    Ok(log_inverse(&LogImage::new(out)?))
}
