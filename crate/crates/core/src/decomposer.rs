//! Dual-branch decomposition of an image into reflectance and illumination
//! components, and the matching reconstruction.
//!
//! The full strategy works on `S = ln(1 + I)` and splits latent features
//! additively: `S̃ = conv(R + L)`. Four variants swap the combine rule, the
//! space, or drop the log transform; all share the same interface.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::gftb::{Gftb, GftbConfig, GuidanceFusion};
use crate::gradcheck::{central_difference, DEFAULT_STEP};
use crate::imaging::{log_forward, log_inverse_tensor, GuidanceKind, GuidanceMap, PixelImage};
use crate::params::{Bound, Builder, Conv, ConvInit, ParamStore};
use crate::strategy::{Combine, Space, Strategy};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposerConfig {
    pub strategy: Strategy,
    pub channels: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    /// Transformer blocks per branch.
    pub depth: usize,
}

impl DecomposerConfig {
    pub fn new(strategy: Strategy, channels: usize) -> Self {
        Self {
            strategy,
            channels,
            heads: 1,
            ffn_expansion: 2,
            depth: 1,
        }
    }

    fn block(&self) -> GftbConfig {
        GftbConfig {
            channels: self.channels,
            heads: self.heads,
            ffn_expansion: self.ffn_expansion,
            fusion: GuidanceFusion::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if self.depth == 0 {
            return Err(Error::Config("decomposer depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameter handles of the decomposer.
#[derive(Clone, Debug)]
pub struct Decomposer {
    cfg: DecomposerConfig,
    in_proj: Conv,
    r_blocks: Vec<Gftb>,
    r_head: Conv,
    l_blocks: Vec<Gftb>,
    l_head: Conv,
    out_proj: Option<Conv>,
}

impl Decomposer {
    fn build<R: Rng>(b: &mut Builder<'_, R>, cfg: DecomposerConfig) -> Self {
        let c = cfg.channels;
        let (cr, cl) = cfg.strategy.component_channels(c);
        let head_init = if cfg.strategy == Strategy::V0PixelMult {
            ConvInit::NormalBias(0.5)
        } else {
            ConvInit::Normal
        };
        let in_proj = b.conv("in_proj", 4, c, 3, ConvInit::Normal);
        let mut branch = |name: &str, out: usize| {
            let mut s = b.scope(name);
            let blocks = (0..cfg.depth)
                .map(|i| Gftb::build(&mut s.scope(&format!("block{i}")), cfg.block()))
                .collect::<Vec<_>>();
            let head = s.conv("head", c, out, 1, head_init);
            (blocks, head)
        };
        let (r_blocks, r_head) = branch("r", cr);
        let (l_blocks, l_head) = branch("l", cl);
        let out_proj = match cfg.strategy.space() {
            Space::Latent => Some(b.conv("out_proj", c, 3, 3, ConvInit::Normal)),
            Space::Pixel => None,
        };
        Self {
            cfg,
            in_proj,
            r_blocks,
            r_head,
            l_blocks,
            l_head,
            out_proj,
        }
    }

    pub fn config(&self) -> DecomposerConfig {
        self.cfg
    }

    /// Splits `input` (`[N, 3, H, W]`, log or pixel domain per strategy)
    /// guided by `prior` (`[N, 1, H, W]`) into `(R, L)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Var, prior: Var) -> Result<(Var, Var)> {
        let [n, c, h, w] = g.shape(input);
        if c != 3 {
            return Err(Error::shape("decomposer input channels", 3, c));
        }
        if g.shape(prior) != [n, 1, h, w] {
            return Err(Error::shape(
                "decomposer prior",
                [n, 1, h, w],
                g.shape(prior),
            ));
        }
        let x = g.concat_c(input, prior)?;
        let f = self.in_proj.forward(g, p, x)?;
        g.ensure_finite(f, "decomposer.in_proj")?;
        let mut branch = |blocks: &[Gftb], head: &Conv, name: &str| -> Result<Var> {
            let mut y = f;
            for b in blocks {
                y = b.forward(g, p, y, None)?.out;
            }
            let mut out = head.forward(g, p, y)?;
            if self.cfg.strategy == Strategy::V0PixelMult {
                out = g.clamp(out, 0.0, 1.0);
            }
            g.ensure_finite(out, name)?;
            Ok(out)
        };
        let r = branch(&self.r_blocks, &self.r_head, "decomposer.r_head")?;
        let l = branch(&self.l_blocks, &self.l_head, "decomposer.l_head")?;
        Ok((r, l))
    }

    /// Recombines components into the strategy's image domain.
    pub fn reconstruct(&self, g: &mut Graph, p: &Bound, r: Var, l: Var) -> Result<Var> {
        let (cr, cl) = self.cfg.strategy.component_channels(self.cfg.channels);
        let [n, rc, h, w] = g.shape(r);
        if rc != cr || g.shape(l) != [n, cl, h, w] {
            return Err(Error::StrategyMismatch(format!(
                "{} expects R with {cr} and L with {cl} channels, got {:?} and {:?}",
                self.cfg.strategy,
                g.shape(r),
                g.shape(l)
            )));
        }
        let out = match self.cfg.strategy {
            Strategy::V0PixelMult => g.mul_bcast_c(r, l)?,
            Strategy::V3RgbAddLog => g.add(r, l)?,
            Strategy::V1LatentMult => {
                let m = g.mul(r, l)?;
                self.out_proj.expect("latent strategy").forward(g, p, m)?
            }
            Strategy::Full | Strategy::V2LatentAddNoLog => {
                let s = g.add(r, l)?;
                self.out_proj.expect("latent strategy").forward(g, p, s)?
            }
        };
        g.ensure_finite(out, "decomposer.reconstruct")?;
        Ok(out)
    }
}

/// Decomposer parameters together with their configuration.
#[derive(Clone, Debug)]
pub struct DecomposerWeights {
    pub params: ParamStore,
    arch: Decomposer,
}

impl DecomposerWeights {
    pub fn init<R: Rng>(cfg: DecomposerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let arch = Decomposer::build(&mut Builder::new(&mut params, rng), cfg);
        Ok(Self { params, arch })
    }

    /// Rebuilds the architecture for `cfg` and loads `params` into it.
    pub fn from_params(cfg: DecomposerConfig, params: &ParamStore) -> Result<Self> {
        // Initial values are overwritten by the load below.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut w = Self::init(cfg, &mut rng)?;
        w.params.load_from(params)?;
        Ok(w)
    }

    pub fn config(&self) -> DecomposerConfig {
        self.arch.cfg
    }

    pub fn strategy(&self) -> Strategy {
        self.arch.cfg.strategy
    }

    pub fn arch(&self) -> &Decomposer {
        &self.arch
    }
}

/// Reflectance and illumination components, `[N, C, H, W]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentComponents {
    pub r: Tensor,
    pub l: Tensor,
    pub strategy: Strategy,
}

/// The network input and illumination prior for `img` under `strategy`:
/// `ln(1 + I)` for log strategies, `I` otherwise, with the prior taken as the
/// per-pixel channel maximum of that input.
pub fn prepare_input(img: &PixelImage, strategy: Strategy) -> (Tensor, GuidanceMap) {
    let input = if strategy.log_transform() {
        log_forward(img).into_tensor()
    } else {
        img.tensor().clone()
    };
    let prior = GuidanceMap {
        data: input.channel_max(),
        kind: GuidanceKind::PriorP,
    };
    (input, prior)
}

/// Maps a reconstruction back to `[0, 1]` pixels.
pub fn to_pixels(t: &Tensor, strategy: Strategy) -> Tensor {
    if strategy.log_transform() {
        log_inverse_tensor(t)
    } else {
        t.map(|v| v.clamp(0.0, 1.0))
    }
}

pub fn decompose(
    input: &Tensor,
    prior: &GuidanceMap,
    w: &DecomposerWeights,
) -> Result<LatentComponents> {
    let mut g = Graph::new();
    let p = w.params.bind(&mut g, false);
    let x = g.input(input.clone());
    let pv = g.input(prior.data.clone());
    let (r, l) = w.arch.forward(&mut g, &p, x, pv)?;
    Ok(LatentComponents {
        r: g.value(r).clone(),
        l: g.value(l).clone(),
        strategy: w.strategy(),
    })
}

pub fn reconstruct(c: &LatentComponents, w: &DecomposerWeights) -> Result<Tensor> {
    if c.strategy != w.strategy() {
        return Err(Error::StrategyMismatch(format!(
            "components from {} given to {} weights",
            c.strategy,
            w.strategy()
        )));
    }
    let mut g = Graph::new();
    let p = w.params.bind(&mut g, false);
    let r = g.input(c.r.clone());
    let l = g.input(c.l.clone());
    let out = w.arch.reconstruct(&mut g, &p, r, l)?;
    Ok(g.value(out).clone())
}

/// Back-propagation coefficients of the combine step at one point.
#[derive(Clone, Debug)]
pub struct JacobianReport {
    pub combine: Combine,
    /// `∂ Σ combine(R, L) / ∂R` by back-propagation.
    pub d_r: Tensor,
    pub d_l: Tensor,
    /// The same gradients by central differences.
    pub fd_r: Tensor,
    pub fd_l: Tensor,
    /// Largest relative disagreement between the two.
    pub max_discrepancy: f64,
    /// Largest magnitude of a cross-element entry `∂ out_i / ∂ R_j`, `i ≠ j`,
    /// over the full finite-difference Jacobian (same-shape components only).
    pub max_off_diagonal: f64,
}

fn combine_tensors(combine: Combine, r: &Tensor, l: &Tensor) -> Tensor {
    let same = r.shape() == l.shape();
    Tensor::from_fn(r.shape(), |n, c, h, w| {
        let lv = if same {
            l.at(n, c, h, w)
        } else {
            l.at(n, 0, h, w)
        };
        match combine {
            Combine::Additive => r.at(n, c, h, w) + lv,
            Combine::Multiplicative => r.at(n, c, h, w) * lv,
        }
    })
}

/// Compares the analytic gradients of the strategy's combine rule (`R + L`
/// or `R ⊙ L`) against central differences at `point`.
pub fn jacobian_diagnostic(strategy: Strategy, point: &LatentComponents) -> Result<JacobianReport> {
    let combine = strategy.combine();
    let [n, c, h, w] = point.r.shape();
    let broadcast = point.l.shape() == [n, 1, h, w] && c != 1;
    if point.l.shape() != point.r.shape() && !broadcast {
        return Err(Error::shape(
            "jacobian_diagnostic",
            point.r.shape(),
            point.l.shape(),
        ));
    }
    let mut g = Graph::new();
    let r = g.param(point.r.clone());
    let l = g.param(point.l.clone());
    let out = match (combine, broadcast) {
        (Combine::Additive, false) => g.add(r, l)?,
        (Combine::Multiplicative, false) => g.mul(r, l)?,
        (Combine::Additive, true) => g.add_bcast_c(r, l)?,
        (Combine::Multiplicative, true) => g.mul_bcast_c(r, l)?,
    };
    let total = g.sum(out);
    g.backward(total);
    let d_r = g
        .grad(r)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.r.shape()));
    let d_l = g
        .grad(l)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.l.shape()));

    let fd_r = central_difference(
        |t| combine_tensors(combine, t, &point.l).sum(),
        &point.r,
        DEFAULT_STEP,
    );
    let fd_l = central_difference(
        |t| combine_tensors(combine, &point.r, t).sum(),
        &point.l,
        DEFAULT_STEP,
    );
    let max_discrepancy = crate::gradcheck::max_relative_error(&d_r, &fd_r)
        .max(crate::gradcheck::max_relative_error(&d_l, &fd_l));

    let mut max_off_diagonal = 0.0f64;
    if !broadcast {
        let len = point.r.len();
        let mut probe = point.r.clone();
        for j in 0..len {
            let orig = probe.data()[j];
            probe.data_mut()[j] = orig + DEFAULT_STEP;
            let plus = combine_tensors(combine, &probe, &point.l);
            probe.data_mut()[j] = orig - DEFAULT_STEP;
            let minus = combine_tensors(combine, &probe, &point.l);
            probe.data_mut()[j] = orig;
            for i in (0..len).filter(|i| *i != j) {
                let d = (plus.data()[i] - minus.data()[i]) / (2.0 * DEFAULT_STEP);
                max_off_diagonal = max_off_diagonal.max(d.abs());
            }
        }
    }
    Ok(JacobianReport {
        combine,
        d_r,
        d_l,
        fd_r,
        fd_l,
        max_discrepancy,
        max_off_diagonal,
    })
}
