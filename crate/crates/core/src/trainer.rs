//! The two training stages, the strategy ablation and the multi-seed
//! stability study.
//!
//! Stage 1 fits the decomposer on paired patches; both images of a pair go
//! through the same weights in the same step. Stage 2 binds a trained
//! decomposer as constants and fits the two refiner branches.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::Graph;
use crate::config::{Stage, TrainConfig};
use crate::dataset::{ImagePair, Sampler};
use crate::decomposer::DecomposerWeights;
use crate::error::{Error, Result};
use crate::evaluator::{reconstruction_psnr, swap_protocol, SwapResult};
use crate::losses::{decom_loss_graph, enhance_loss_graph, DecomSide, FeatureExtractor};
use crate::optim::{clip_global_norm, cosine_lr, Adam};
use crate::refiner::RefinerWeights;
use crate::strategy::{Combine, Strategy};
use crate::tensor::Tensor;

/// Learning rate at `step` under the configured cosine schedule.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    cosine_lr(step, cfg.iterations, cfg.lr_initial, cfg.lr_final)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    /// Values of the named loss terms, in [`TrainRunRecord::term_names`]
    /// order.
    pub terms: Vec<f64>,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Per-step log of one training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRunRecord {
    pub stage: Stage,
    pub strategy: Strategy,
    pub seed: u64,
    pub term_names: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub clip_events: usize,
    /// Checksum of the weights produced by the run.
    pub weights_checksum: String,
    /// Checksum of the frozen decomposer before and after stage 2.
    pub frozen_checksum: Option<(String, String)>,
    pub wall_time_secs: f64,
}

impl TrainRunRecord {
    pub fn new(stage: Stage, strategy: Strategy, seed: u64, term_names: &[&str]) -> Self {
        Self {
            stage,
            strategy,
            seed,
            term_names: term_names.iter().map(|s| s.to_string()).collect(),
            steps: Vec::new(),
            clip_events: 0,
            weights_checksum: String::new(),
            frozen_checksum: None,
            wall_time_secs: 0.0,
        }
    }

    /// `step,lr,total,<terms...>` with one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,total");
        for t in &self.term_names {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for s in &self.steps {
            let _ = write!(out, "{},{:e},{:e}", s.step, s.lr, s.total);
            for v in &s.terms {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean total loss over consecutive windows of `epoch_steps` steps; a
    /// trailing partial window is dropped unless it is the only one.
    pub fn epoch_losses(&self, epoch_steps: usize) -> Vec<f64> {
        let chunks: Vec<&[StepRecord]> = self.steps.chunks(epoch_steps.max(1)).collect();
        let full = chunks.iter().filter(|c| c.len() == epoch_steps).count();
        chunks
            .into_iter()
            .take(if full == 0 { 1 } else { full })
            .map(|c| c.iter().map(|s| s.total).sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.total)
    }
}

fn log1p_tensor(t: &Tensor) -> Tensor {
    t.map(f64::ln_1p)
}

fn abort(step: usize, names: &[&str], values: &[f64]) -> Error {
    let terms = names
        .iter()
        .zip(values)
        .map(|(n, v)| format!("{n}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    Error::NumericalAbort { step, terms }
}

fn forward_abort(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { layer } => Error::NumericalAbort {
            step,
            terms: format!("non-finite activations in {layer}"),
        },
        other => other,
    }
}

fn check_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "config stage is {:?}, expected {stage:?}",
            cfg.stage
        )));
    }
    cfg.validate()
}

const DECOM_TERMS: [&str; 3] = ["recon", "is_smooth", "ir_consistency"];
const ENHANCE_TERMS: [&str; 2] = ["l1", "perceptual"];

/// Fits a decomposer of `cfg.strategy` to `pairs`.
pub fn train_decomposition(
    cfg: &TrainConfig,
    pairs: &[ImagePair],
) -> Result<(DecomposerWeights, TrainRunRecord)> {
    check_stage(cfg, Stage::Decomposition)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = DecomposerWeights::init(cfg.decomposer_config(), &mut rng)?;
    let sampler = Sampler::new(pairs, cfg.patch_size, cfg.augment)?;
    let mut opt = Adam::new(&w.params, cfg.beta1, cfg.beta2);
    let wts = cfg.loss_weights();
    let clip = cfg.strategy.combine() == Combine::Multiplicative && cfg.clip_norm > 0.0;
    let log = cfg.strategy.log_transform();
    let mut record =
        TrainRunRecord::new(Stage::Decomposition, cfg.strategy, cfg.seed, &DECOM_TERMS);
    let arch = w.arch().clone();

    for step in 0..cfg.iterations {
        let (low, normal) = sampler.batch(cfg.batch_size, &mut rng)?;
        let (low, normal) = if log {
            (log1p_tensor(&low), log1p_tensor(&normal))
        } else {
            (low, normal)
        };
        let mut g = Graph::new();
        let p = w.params.bind(&mut g, true);
        let side = |g: &mut Graph, x: Tensor| -> Result<DecomSide> {
            let prior = g.input(x.channel_max());
            let target = g.input(x);
            let (r, l) = arch.forward(g, &p, target, prior)?;
            let reconstruction = arch.reconstruct(g, &p, r, l)?;
            Ok(DecomSide {
                r,
                l,
                reconstruction,
                target,
            })
        };
        let lo = side(&mut g, low).map_err(|e| forward_abort(step, e))?;
        let no = side(&mut g, normal).map_err(|e| forward_abort(step, e))?;
        let vars = decom_loss_graph(&mut g, lo, no, wts)?;
        let terms = vars.values(&g, wts);
        let values = [terms.recon, terms.is_smooth, terms.ir_consistency];
        if !terms.total.is_finite() {
            return Err(abort(step, &DECOM_TERMS, &values));
        }
        g.backward(vars.total);
        let mut grads = w.params.grads(&g, &p);
        let (grad_norm, clipped) = if clip {
            clip_global_norm(&mut grads, cfg.clip_norm)
        } else {
            (crate::optim::global_norm(&grads), false)
        };
        if !grad_norm.is_finite() {
            return Err(abort(step, &DECOM_TERMS, &values));
        }
        let lr = lr_schedule(step, cfg);
        opt.step(&mut w.params, &grads, lr);
        record.clip_events += clipped as usize;
        record.steps.push(StepRecord {
            step,
            lr,
            total: terms.total,
            terms: values.to_vec(),
            grad_norm,
            clipped,
        });
    }
    record.weights_checksum = w.params.checksum();
    record.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((w, record))
}

/// Fits the refiner branches on top of the frozen full-strategy decomposer
/// `frozen`. The decomposer enters the graph only as constants.
pub fn train_enhancement(
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    frozen: &DecomposerWeights,
) -> Result<(RefinerWeights, TrainRunRecord)> {
    check_stage(cfg, Stage::Enhancement)?;
    if frozen.strategy() != Strategy::Full {
        return Err(Error::StrategyMismatch(format!(
            "enhancement training needs a full-strategy decomposer, got {}",
            frozen.strategy()
        )));
    }
    if frozen.config().channels != cfg.channels {
        return Err(Error::Config(format!(
            "decomposer has {} channels but the config asks for {}",
            frozen.config().channels,
            cfg.channels
        )));
    }
    let start = Instant::now();
    let before = frozen.params.checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rw = RefinerWeights::init(cfg.refiner_config(), &mut rng)?;
    let sampler = Sampler::new(pairs, cfg.patch_size, cfg.augment)?;
    let mut opt_r = Adam::new(&rw.r.params, cfg.beta1, cfg.beta2);
    let mut opt_l = Adam::new(&rw.l.params, cfg.beta1, cfg.beta2);
    let extractor = cfg.perceptual.then(FeatureExtractor::default);
    let dec = frozen.arch().clone();
    let mut record =
        TrainRunRecord::new(Stage::Enhancement, Strategy::Full, cfg.seed, &ENHANCE_TERMS);

    for step in 0..cfg.iterations {
        let (low, normal) = sampler.batch(cfg.batch_size, &mut rng)?;
        let s_low = log1p_tensor(&low);
        let s_norm = log1p_tensor(&normal);
        let mut g = Graph::new();
        let dp = frozen.params.bind(&mut g, false);
        let pr = rw.r.params.bind(&mut g, true);
        let pl = rw.l.params.bind(&mut g, true);
        let ex = extractor.as_ref().map(|e| (e, e.bind(&mut g)));
        let run = |g: &mut Graph| -> Result<_> {
            let x = g.input(s_low.clone());
            let prior = g.input(s_low.channel_max());
            let (r, l) = dec.forward(g, &dp, x, prior)?;
            let r2 = rw.r.arch().forward(g, &pr, r, &s_low.channel_mean())?;
            let l2 = rw.l.arch().forward(g, &pl, l, &s_low.channel_max())?;
            dec.reconstruct(g, &dp, r2, l2)
        };
        let s_en = run(&mut g).map_err(|e| forward_abort(step, e))?;
        let target = g.input(s_norm);
        let vars = enhance_loss_graph(
            &mut g,
            s_en,
            target,
            cfg.lambda_p,
            ex.as_ref().map(|(e, b)| (*e, b)),
        )?;
        let total = g.value(vars.total).item();
        let values = [
            g.value(vars.l1).item(),
            vars.perceptual.map_or(0.0, |v| g.value(v).item()),
        ];
        if !total.is_finite() {
            return Err(abort(step, &ENHANCE_TERMS, &values));
        }
        g.backward(vars.total);
        let gr = rw.r.params.grads(&g, &pr);
        let gl = rw.l.params.grads(&g, &pl);
        let grad_norm = (crate::optim::global_norm(&gr).powi(2)
            + crate::optim::global_norm(&gl).powi(2))
        .sqrt();
        if !grad_norm.is_finite() {
            return Err(abort(step, &ENHANCE_TERMS, &values));
        }
        let lr = lr_schedule(step, cfg);
        opt_r.step(&mut rw.r.params, &gr, lr);
        opt_l.step(&mut rw.l.params, &gl, lr);
        record.steps.push(StepRecord {
            step,
            lr,
            total,
            terms: values.to_vec(),
            grad_norm,
            clipped: false,
        });
    }
    let after = frozen.params.checksum();
    if before != after {
        return Err(Error::InvalidInput(
            "frozen decomposer weights changed during training".into(),
        ));
    }
    record.weights_checksum = format!("{}:{}", rw.r.params.checksum(), rw.l.params.checksum());
    record.frozen_checksum = Some((before, after));
    record.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((rw, record))
}

/// Reference figures from the full-size study, quoted in reports for
/// context: (mean PSNR, variance) for additive and multiplicative training.
pub const FULL_SCALE_REFERENCE: [(&str, f64, f64); 2] =
    [("additive", 23.84, 0.067), ("multiplicative", 22.16, 0.157)];

/// Aggregated runs of one strategy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyStability {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    /// Mean total loss per epoch across runs.
    pub epoch_mean: Vec<f64>,
    /// Population variance of the per-run epoch losses.
    pub epoch_var: Vec<f64>,
    /// Mean reconstruction PSNR over the training pairs, per run.
    pub final_metric: Vec<f64>,
    pub final_mean: f64,
    pub final_var: f64,
    pub clip_events: usize,
    /// Runs that stopped on a numerical abort; excluded from the statistics.
    pub aborted: Vec<(u64, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub runs: usize,
    pub epoch_steps: usize,
    pub strategies: Vec<StrategyStability>,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

impl StrategyStability {
    /// `epoch,mean_loss,var_loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,var_loss\n");
        for (i, (m, v)) in self.epoch_mean.iter().zip(&self.epoch_var).enumerate() {
            let _ = writeln!(out, "{i},{m:e},{v:e}");
        }
        out
    }
}

impl StabilityReport {
    /// One row per strategy with the final-metric statistics.
    pub fn summary_csv(&self) -> String {
        let mut out =
            String::from("strategy,runs,aborted,final_psnr_mean,final_psnr_var,clip_events\n");
        for s in &self.strategies {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{}",
                s.strategy,
                s.final_metric.len(),
                s.aborted.len(),
                s.final_mean,
                s.final_var,
                s.clip_events
            );
        }
        out
    }

    /// Human-readable summary including the full-scale reference figures.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "runs per strategy: {}, epoch = {} steps",
            self.runs, self.epoch_steps
        );
        for s in &self.strategies {
            let last = s.epoch_mean.last().copied().unwrap_or(f64::NAN);
            let last_var = s.epoch_var.last().copied().unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "{:<22} final loss {:.6} (var {:.3e})  recon psnr {:.3} dB (var {:.4})  clip events {}  aborted {}",
                s.strategy.as_str(),
                last,
                last_var,
                s.final_mean,
                s.final_var,
                s.clip_events,
                s.aborted.len()
            );
        }
        let _ = writeln!(out, "full-scale reference (not reproduced here):");
        for (name, m, v) in FULL_SCALE_REFERENCE {
            let _ = writeln!(out, "  {name:<15} mean psnr {m:.2}, variance {v:.3}");
        }
        out
    }
}

/// Trains `n_runs` decomposers per strategy with seeds `cfg.seed + r` and
/// aggregates their per-epoch losses. Runs execute in parallel; results do
/// not depend on scheduling.
pub fn stability_study(
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    n_runs: usize,
    strategies: &[Strategy],
) -> Result<StabilityReport> {
    if n_runs == 0 || strategies.is_empty() {
        return Err(Error::Config(
            "stability study needs at least one run and one strategy".into(),
        ));
    }
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|s| (0..n_runs as u64).map(move |r| (*s, r)))
        .collect();
    let results: Vec<Result<(TrainRunRecord, f64)>> = jobs
        .par_iter()
        .map(|(s, r)| {
            let mut c = cfg.clone();
            c.stage = Stage::Decomposition;
            c.strategy = *s;
            c.seed = cfg.seed.wrapping_add(*r);
            let (w, rec) = train_decomposition(&c, pairs)?;
            let psnrs = pairs
                .iter()
                .flat_map(|p| [&p.low, &p.normal])
                .map(|img| reconstruction_psnr(img, &w))
                .collect::<Result<Vec<_>>>()?;
            Ok((rec, psnrs.iter().sum::<f64>() / psnrs.len() as f64))
        })
        .collect();

    let mut out = Vec::new();
    for s in strategies {
        let mut curves = Vec::new();
        let mut metrics = Vec::new();
        let mut seeds = Vec::new();
        let mut aborted = Vec::new();
        let mut clip_events = 0;
        for ((js, r), res) in jobs.iter().zip(&results) {
            if js != s {
                continue;
            }
            let seed = cfg.seed.wrapping_add(*r);
            match res {
                Ok((rec, metric)) => {
                    curves.push(rec.epoch_losses(cfg.epoch_steps));
                    metrics.push(*metric);
                    seeds.push(seed);
                    clip_events += rec.clip_events;
                }
                Err(e @ Error::NumericalAbort { .. }) => aborted.push((seed, e.to_string())),
                Err(e) => {
                    return Err(Error::InvalidInput(format!(
                        "{s} run with seed {seed}: {e}"
                    )))
                }
            }
        }
        let epochs = curves.iter().map(Vec::len).min().unwrap_or(0);
        let (epoch_mean, epoch_var) = (0..epochs)
            .map(|e| mean_var(&curves.iter().map(|c| c[e]).collect::<Vec<_>>()))
            .unzip();
        let (final_mean, final_var) = mean_var(&metrics);
        out.push(StrategyStability {
            strategy: *s,
            seeds,
            epoch_mean,
            epoch_var,
            final_metric: metrics,
            final_mean,
            final_var,
            clip_events,
            aborted,
        });
    }
    Ok(StabilityReport {
        runs: n_runs,
        epoch_steps: cfg.epoch_steps,
        strategies: out,
    })
}

/// Swap-protocol scores of one strategy, averaged over the pairs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    /// `None` when training aborted.
    pub swap: Option<SwapResult>,
    pub final_loss: Option<f64>,
    pub clip_events: usize,
    pub abort: Option<String>,
}

impl AblationRow {
    /// Mean of the four swap PSNRs, `NaN` for aborted runs.
    pub fn mean_psnr(&self) -> f64 {
        self.swap.as_ref().map_or(f64::NAN, SwapResult::mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, s: Strategy) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }

    /// `strategy,psnr_ll,psnr_ln,psnr_nl,psnr_nn,mean_psnr,final_loss,clip_events,status`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "strategy,psnr_ll,psnr_ln,psnr_nl,psnr_nn,mean_psnr,final_loss,clip_events,status\n",
        );
        for r in &self.rows {
            let (ll, ln, nl, nn) = r
                .swap
                .map_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN), |s| {
                    (s.psnr_ll, s.psnr_ln, s.psnr_nl, s.psnr_nn)
                });
            let _ = writeln!(
                out,
                "{},{ll:.4},{ln:.4},{nl:.4},{nn:.4},{:.4},{:e},{},{}",
                r.strategy,
                r.mean_psnr(),
                r.final_loss.unwrap_or(f64::NAN),
                r.clip_events,
                if r.abort.is_some() { "aborted" } else { "ok" }
            );
        }
        out
    }
}

/// Trains one decomposer per strategy with the same seed and data, then runs
/// the swap protocol on every pair. Strategies train in parallel.
pub fn ablation_study(
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    strategies: &[Strategy],
) -> Result<AblationReport> {
    if strategies.is_empty() {
        return Err(Error::Config("ablation needs at least one strategy".into()));
    }
    let rows = strategies
        .par_iter()
        .map(|s| {
            let mut c = cfg.clone();
            c.stage = Stage::Decomposition;
            c.strategy = *s;
            match train_decomposition(&c, pairs) {
                Ok((w, rec)) => {
                    let swaps = pairs
                        .iter()
                        .map(|p| swap_protocol(&p.low, &p.normal, &w))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(AblationRow {
                        strategy: *s,
                        swap: SwapResult::average(&swaps),
                        final_loss: rec.final_loss(),
                        clip_events: rec.clip_events,
                        abort: None,
                    })
                }
                Err(e @ Error::NumericalAbort { .. }) => Ok(AblationRow {
                    strategy: *s,
                    swap: None,
                    final_loss: None,
                    clip_events: 0,
                    abort: Some(e.to_string()),
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}

/// Centered moving average with window `k` (shrinking at the ends).
pub fn smooth(values: &[f64], k: usize) -> Vec<f64> {
    let half = k / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
