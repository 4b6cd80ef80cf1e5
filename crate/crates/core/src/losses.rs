//! Training objectives.
//!
//! Decomposition: `recon + λ1·smooth + λ2·consistency` over a low/normal
//! pair. Enhancement: `|S_en - S_n|₁ + λp·perceptual`. Every norm is
//! mean-reduced so the weights carry over between patch sizes.
//!
//! Each loss exists twice: as graph operations for training, and as plain
//! tensor functions returning numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::decomposer::{reconstruct, DecomposerWeights, LatentComponents};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Default exponent coefficient of the edge-aware smoothness weight. The
/// negative sign relaxes the penalty where reflectance has edges.
pub const DEFAULT_ALPHA_SMOOTH: f64 = -10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecomLossTerms {
    pub recon: f64,
    pub is_smooth: f64,
    pub ir_consistency: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha_smooth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnhanceLossTerms {
    pub l1: f64,
    pub perceptual: f64,
    pub total: f64,
    pub lambda_p: f64,
    /// Set when no feature extractor was available and the perceptual term
    /// was skipped.
    pub perceptual_missing: bool,
}

/// Weights of the decomposition objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecomLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha_smooth: f64,
}

/// Graph handles of the decomposition loss terms.
#[derive(Clone, Copy, Debug)]
pub struct DecomLossVars {
    pub recon: Var,
    pub is_smooth: Var,
    pub ir_consistency: Var,
    pub total: Var,
}

/// One side of a decomposition pair inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct DecomSide {
    pub r: Var,
    pub l: Var,
    pub reconstruction: Var,
    pub target: Var,
}

fn same_shape(g: &Graph, a: Var, b: Var, ctx: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(ctx, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// `mean |a - b|`.
pub fn l1_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "l1")?;
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Edge-aware smoothness of `l` guided by the channel mean of `r`:
/// for each direction, the mean over valid forward-difference positions of
/// `|∇L| · exp(α |∇ mean_c(R)|)`, summed over the two directions.
pub fn smoothness_graph(g: &mut Graph, r: Var, l: Var, alpha: f64) -> Result<Var> {
    let [n, _, h, w] = g.shape(r);
    let [nl, _, hl, wl] = g.shape(l);
    if (n, h, w) != (nl, hl, wl) {
        return Err(Error::shape("smoothness", g.shape(r), g.shape(l)));
    }
    let rm = g.mean_c(r);
    let mut terms = Vec::new();
    for horizontal in [true, false] {
        let (dl, dr) = if horizontal {
            (g.diff_w(l), g.diff_w(rm))
        } else {
            (g.diff_h(l), g.diff_h(rm))
        };
        if g.value(dl).is_empty() {
            continue;
        }
        let dl = g.abs(dl);
        let dr = g.abs(dr);
        let e = g.scale(dr, alpha);
        let weight = g.exp(e);
        let prod = g.mul_bcast_c(dl, weight)?;
        terms.push(g.mean(prod));
    }
    match terms.as_slice() {
        [] => Ok(g.input(Tensor::scalar(0.0))),
        [t] => Ok(*t),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// Full decomposition objective over a low/normal pair.
pub fn decom_loss_graph(
    g: &mut Graph,
    low: DecomSide,
    normal: DecomSide,
    wts: DecomLossWeights,
) -> Result<DecomLossVars> {
    let rl = l1_graph(g, low.reconstruction, low.target)?;
    let rn = l1_graph(g, normal.reconstruction, normal.target)?;
    let recon = g.add(rl, rn)?;
    let sl = smoothness_graph(g, low.r, low.l, wts.alpha_smooth)?;
    let sn = smoothness_graph(g, normal.r, normal.l, wts.alpha_smooth)?;
    let is_smooth = g.add(sl, sn)?;
    let ir_consistency = l1_graph(g, low.r, normal.r)?;
    let a = g.scale(is_smooth, wts.lambda1);
    let b = g.scale(ir_consistency, wts.lambda2);
    let total = g.add(recon, a)?;
    let total = g.add(total, b)?;
    Ok(DecomLossVars {
        recon,
        is_smooth,
        ir_consistency,
        total,
    })
}

impl DecomLossVars {
    pub fn values(&self, g: &Graph, wts: DecomLossWeights) -> DecomLossTerms {
        DecomLossTerms {
            recon: g.value(self.recon).item(),
            is_smooth: g.value(self.is_smooth).item(),
            ir_consistency: g.value(self.ir_consistency).item(),
            total: g.value(self.total).item(),
            lambda1: wts.lambda1,
            lambda2: wts.lambda2,
            alpha_smooth: wts.alpha_smooth,
        }
    }
}

fn scalar_of(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

/// Sum over the pair of `mean |reconstruct(R_i, L_i) - S_i|`.
pub fn recon_loss(
    low: &LatentComponents,
    normal: &LatentComponents,
    target_low: &Tensor,
    target_normal: &Tensor,
    w: &DecomposerWeights,
) -> Result<f64> {
    let rec_l = reconstruct(low, w)?;
    let rec_n = reconstruct(normal, w)?;
    scalar_of(|g| {
        let (a, b) = (g.input(rec_l), g.input(target_low.clone()));
        let (c, d) = (g.input(rec_n), g.input(target_normal.clone()));
        let x = l1_graph(g, a, b)?;
        let y = l1_graph(g, c, d)?;
        g.add(x, y)
    })
}

pub fn smoothness_loss(r: &Tensor, l: &Tensor, alpha: f64) -> Result<f64> {
    scalar_of(|g| {
        let (r, l) = (g.input(r.clone()), g.input(l.clone()));
        smoothness_graph(g, r, l, alpha)
    })
}

/// `mean |R_l - R_n|`.
pub fn reflectance_consistency(r_low: &Tensor, r_normal: &Tensor) -> Result<f64> {
    scalar_of(|g| {
        let (a, b) = (g.input(r_low.clone()), g.input(r_normal.clone()));
        l1_graph(g, a, b)
    })
}

/// Every decomposition term for a pair of decompositions.
pub fn decom_loss(
    low: &LatentComponents,
    normal: &LatentComponents,
    target_low: &Tensor,
    target_normal: &Tensor,
    w: &DecomposerWeights,
    wts: DecomLossWeights,
) -> Result<DecomLossTerms> {
    let rec_l = reconstruct(low, w)?;
    let rec_n = reconstruct(normal, w)?;
    let mut g = Graph::new();
    let mut side = |c: &LatentComponents, rec: Tensor, target: &Tensor| DecomSide {
        r: g.input(c.r.clone()),
        l: g.input(c.l.clone()),
        reconstruction: g.input(rec),
        target: g.input(target.clone()),
    };
    let lo = side(low, rec_l, target_low);
    let no = side(normal, rec_n, target_normal);
    let vars = decom_loss_graph(&mut g, lo, no, wts)?;
    Ok(vars.values(&g, wts))
}

/// Fixed feature stack for the perceptual term: three convolution stages
/// (3→8, 8→16 stride 2, 16→32 stride 2) with GELU activations. Weights are
/// drawn uniformly from a fixed seed, so every build yields identical
/// features.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    params: ParamStore,
    stages: Vec<crate::params::Conv>,
}

/// Seed of the default extractor weights.
pub const EXTRACTOR_SEED: u64 = 0x5eed_f00d;

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        for (i, (cin, cout, stride)) in [(3, 8, 1), (8, 16, 2), (16, 32, 2)].into_iter().enumerate()
        {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let w = Tensor::from_fn([cout, cin, 3, 3], |_, _, _, _| {
                rng.random_range(-bound..bound)
            });
            let w = params.insert(format!("stage{i}.weight"), w);
            let b = params.insert(format!("stage{i}.bias"), Tensor::zeros([1, cout, 1, 1]));
            stages.push(crate::params::Conv {
                w,
                b,
                stride,
                pad: 1,
            });
        }
        Self { params, stages }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Binds the frozen weights into `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, false)
    }

    /// Feature maps after each stage.
    pub fn features(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut y = x;
        for conv in &self.stages {
            y = conv.forward(g, p, y)?;
            y = g.gelu(y);
            out.push(y);
        }
        Ok(out)
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(EXTRACTOR_SEED)
    }
}

/// Graph handles of the enhancement loss.
#[derive(Clone, Copy, Debug)]
pub struct EnhanceLossVars {
    pub l1: Var,
    pub perceptual: Option<Var>,
    pub total: Var,
}

/// `mean |S_en - S_n| + λp · mean_k MSE(φ_k(S_en), φ_k(S_n))`.
pub fn enhance_loss_graph(
    g: &mut Graph,
    s_en: Var,
    s_n: Var,
    lambda_p: f64,
    extractor: Option<(&FeatureExtractor, &Bound)>,
) -> Result<EnhanceLossVars> {
    let l1 = l1_graph(g, s_en, s_n)?;
    let Some((ex, p)) = extractor else {
        return Ok(EnhanceLossVars {
            l1,
            perceptual: None,
            total: l1,
        });
    };
    let fa = ex.features(g, p, s_en)?;
    let fb = ex.features(g, p, s_n)?;
    let k = fa.len() as f64;
    let mut acc: Option<Var> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let d = g.sub(a, b)?;
        let d = g.square(d);
        let m = g.mean(d);
        acc = Some(match acc {
            Some(s) => g.add(s, m)?,
            None => m,
        });
    }
    let perceptual = g.scale(acc.expect("extractor has stages"), 1.0 / k);
    let weighted = g.scale(perceptual, lambda_p);
    let total = g.add(l1, weighted)?;
    Ok(EnhanceLossVars {
        l1,
        perceptual: Some(perceptual),
        total,
    })
}

pub fn enhance_loss(
    s_en: &Tensor,
    s_n: &Tensor,
    lambda_p: f64,
    extractor: Option<&FeatureExtractor>,
) -> Result<EnhanceLossTerms> {
    let mut g = Graph::new();
    let a = g.input(s_en.clone());
    let b = g.input(s_n.clone());
    let bound = extractor.map(|e| e.bind(&mut g));
    let vars = enhance_loss_graph(&mut g, a, b, lambda_p, extractor.zip(bound.as_ref()))?;
    Ok(EnhanceLossTerms {
        l1: g.value(vars.l1).item(),
        perceptual: vars.perceptual.map_or(0.0, |v| g.value(v).item()),
        total: g.value(vars.total).item(),
        lambda_p,
        perceptual_missing: vars.perceptual.is_none(),
    })
}
