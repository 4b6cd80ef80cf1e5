//! Training configuration: a flat key/value schema read from TOML, with two
//! built-in profiles and `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decomposer::DecomposerConfig;
use crate::error::{Error, Result};
use crate::gftb::GuidanceFusion;
use crate::losses::{DecomLossWeights, DEFAULT_ALPHA_SMOOTH};
use crate::refiner::{RefinerConfig, SIZE_MULTIPLE};
use crate::strategy::Strategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Decomposition,
    Enhancement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small images, few channels, short schedules.
    Desk,
    /// The full-size schedule.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub profile: Profile,
    pub stage: Stage,
    pub strategy: Strategy,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_p: f64,
    pub alpha_smooth: f64,
    pub channels: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub decomposer_depth: usize,
    pub refiner_depths: [usize; 3],
    pub fusion: GuidanceFusion,
    /// Global gradient-norm bound for multiplicative strategies; `0` disables.
    pub clip_norm: f64,
    /// Steps per epoch in loss summaries.
    pub epoch_steps: usize,
    pub augment: bool,
    /// Include the feature-space term of the enhancement loss.
    pub perceptual: bool,
    pub data_root: Option<PathBuf>,
    pub low_dir: String,
    pub high_dir: String,
    /// Ingest at most this many pairs; `0` means all.
    pub max_pairs: usize,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            stage: Stage::Decomposition,
            strategy: Strategy::Full,
            seed: 0,
            iterations: 150_000,
            batch_size: 4,
            patch_size: 256,
            lr_initial: 2e-4,
            lr_final: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            lambda1: 0.1,
            lambda2: 1.0,
            lambda_p: 0.01,
            alpha_smooth: DEFAULT_ALPHA_SMOOTH,
            channels: 40,
            heads: 1,
            ffn_expansion: 2,
            decomposer_depth: 1,
            refiner_depths: [1, 2, 2],
            fusion: GuidanceFusion::CrossAttention,
            clip_norm: 1.0,
            epoch_steps: 50,
            augment: true,
            perceptual: true,
            data_root: None,
            low_dir: "low".into(),
            high_dir: "high".into(),
            max_pairs: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            iterations: 2000,
            batch_size: 2,
            patch_size: 32,
            lr_initial: 1e-2,
            channels: 8,
            ..Self::full()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    /// Every key accepted in a config file or override.
    pub fn keys() -> Vec<String> {
        match toml::Value::try_from(Self::desk()) {
            Ok(toml::Value::Table(t)) => {
                let mut keys: Vec<String> = t.keys().cloned().collect();
                // `data_root` has no default and is absent from the table.
                keys.push("data_root".into());
                keys.sort();
                keys.dedup();
                keys
            }
            _ => unreachable!("config serializes to a table"),
        }
    }

    /// Parses TOML text: `profile` picks the defaults, remaining keys
    /// override them, then `overrides` (`key=value`) override the file.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = format!("v = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.trim().to_string(), value);
        }
        let valid = Self::keys();
        let mut unknown: Vec<&String> = table.keys().filter(|k| !valid.contains(k)).collect();
        if !unknown.is_empty() {
            unknown.sort();
            return Err(Error::Config(format!(
                "unknown key(s) {}; valid keys: {}",
                unknown
                    .iter()
                    .map(|k| k.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
                valid.join(", ")
            )));
        }
        let profile = match table.get("profile") {
            Some(v) => v
                .clone()
                .try_into::<Profile>()
                .map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => Profile::Desk,
        };
        let toml::Value::Table(mut merged) = toml::Value::try_from(Self::for_profile(profile))
            .map_err(|e| Error::Config(e.to_string()))?
        else {
            unreachable!("config serializes to a table")
        };
        merged.extend(table);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.batch_size == 0 || self.epoch_steps == 0 {
            return fail("iterations, batch_size and epoch_steps must be positive".into());
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(SIZE_MULTIPLE) {
            return fail(format!(
                "patch_size must be a positive multiple of {SIZE_MULTIPLE}"
            ));
        }
        if !(self.lr_initial > 0.0 && self.lr_final >= 0.0 && self.lr_final <= self.lr_initial) {
            return fail("need lr_initial > 0 and 0 <= lr_final <= lr_initial".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_p", self.lambda_p),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        if !self.alpha_smooth.is_finite() {
            return fail("alpha_smooth must be finite".into());
        }
        self.decomposer_config().validate()?;
        self.refiner_config().validate()?;
        Ok(())
    }

    pub fn decomposer_config(&self) -> DecomposerConfig {
        DecomposerConfig {
            strategy: self.strategy,
            channels: self.channels,
            heads: self.heads,
            ffn_expansion: self.ffn_expansion,
            depth: self.decomposer_depth,
        }
    }

    pub fn refiner_config(&self) -> RefinerConfig {
        RefinerConfig {
            channels: self.channels,
            heads: self.heads,
            ffn_expansion: self.ffn_expansion,
            fusion: self.fusion,
            depths: self.refiner_depths,
        }
    }

    pub fn loss_weights(&self) -> DecomLossWeights {
        DecomLossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            alpha_smooth: self.alpha_smooth,
        }
    }

    /// Where the `low/` and `high/` directories live.
    pub fn pair_dirs(&self) -> Option<(PathBuf, PathBuf)> {
        self.data_root
            .as_ref()
            .map(|r| (r.join(&self.low_dir), r.join(&self.high_dir)))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}
