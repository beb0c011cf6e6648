//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [model.encoder]
//! embed_dim = 64
//!
//! [optim]
//! lr = 2e-4
//! epochs = 9
//!
//! [qfm]
//! lambda1 = 1e-7
//! k_a = 1
//!
//! [dle]
//! enabled = true
//! teacher = "teacher.ckpt"
//! pool = "pool/manifest.csv"
//!
//! [data]
//! train = "train/manifest.csv"
//! ```
//!
//! Every section and key is optional; omitted values take the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::qcc::{LabelMixWeights, MixWeights};
use crate::snm::{MatchConfig, MatchMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f32,
    /// Learning rate is divided by this every `decay_every` epochs.
    pub decay_factor: f32,
    pub decay_every: usize,
    /// Linear warmup over the first steps of a run; 0 disables it.
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            decay_factor: 10.0,
            decay_every: 3,
            warmup_steps: 0,
            epochs: 9,
            batch_size: 16,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = (epoch / self.decay_every.max(1)) as i32;
        self.lr / self.decay_factor.powi(drops)
    }

    /// Learning rate for global step `step` (0-based) inside `epoch`.
    pub fn lr_at_step(&self, epoch: usize, step: usize) -> f32 {
        let base = self.lr_at(epoch);
        if step < self.warmup_steps {
            base * (step + 1) as f32 / self.warmup_steps as f32
        } else {
            base
        }
    }
}

/// Matching and mixing. `enabled = false` trains on clean features only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QfmConfig {
    pub enabled: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub k_a: usize,
    pub k_b: usize,
    pub clamp_cos: bool,
    pub zscore_scores: bool,
    pub layernorm_features: bool,
    pub mode: MatchMode,
    /// Add the clean-feature loss to the perturbed one.
    pub clean_loss: bool,
    /// Ablation arm: mix matched labels into the target instead of mixing
    /// features.
    pub label_mix: bool,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for QfmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda1: 1e-7,
            lambda2: 1e-7,
            k_a: 1,
            k_b: 1,
            clamp_cos: true,
            zscore_scores: true,
            layernorm_features: true,
            mode: MatchMode::Full,
            clean_loss: false,
            label_mix: false,
            beta1: 0.1,
            beta2: 0.1,
        }
    }
}

impl QfmConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            clamp_cos: self.clamp_cos,
            zscore_scores: self.zscore_scores,
            layernorm_features: self.layernorm_features,
            mode: self.mode,
        }
    }

    pub fn mix_weights(&self) -> Result<MixWeights> {
        MixWeights::new(self.lambda1, self.lambda2, self.k_a.max(self.k_b))
    }

    pub fn label_weights(&self) -> Result<LabelMixWeights> {
        LabelMixWeights::new(self.beta1, self.beta2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DleConfig {
    pub enabled: bool,
    /// Teacher checkpoint path.
    pub teacher: Option<PathBuf>,
    /// Unlabeled pool manifest path.
    pub pool: Option<PathBuf>,
    /// Pool samples per step; defaults to the labeled batch size.
    pub batch_size: Option<usize>,
    /// Keep pseudo-labels across steps instead of recomputing them.
    pub cache: bool,
}

impl Default for DleConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            teacher: None,
            pool: None,
            batch_size: None,
            cache: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Labeled manifest; split into train/test unless `test` is given.
    pub train: Option<PathBuf>,
    /// Fixed test manifest (no splitting; one repeat).
    pub test: Option<PathBuf>,
    pub split_fraction: f64,
    pub repeats: usize,
    /// Evaluate on the test side after every epoch, not just the last.
    pub eval_every_epoch: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            split_fraction: 0.8,
            repeats: 1,
            eval_every_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub qfm: QfmConfig,
    pub dle: DleConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            qfm: QfmConfig::default(),
            dle: DleConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative manifest and checkpoint paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.data.train,
            &mut self.data.test,
            &mut self.dle.teacher,
            &mut self.dle.pool,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", o.lr)));
        }
        if !(o.decay_factor.is_finite() && o.decay_factor >= 1.0) {
            return Err(Error::Config("decay_factor must be at least 1".into()));
        }
        if o.epochs == 0 || o.batch_size == 0 || o.decay_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and decay_every must be positive".into(),
            ));
        }
        if self.qfm.enabled {
            self.qfm.mix_weights()?;
            if self.qfm.k_a == 0 || self.qfm.k_b == 0 {
                return Err(Error::Config("k_a and k_b must be at least 1".into()));
            }
        }
        if self.qfm.label_mix {
            self.qfm.label_weights()?;
        }
        if self.dle.batch_size == Some(0) {
            return Err(Error::Config("dle.batch_size must be positive".into()));
        }
        let d = &self.data;
        if !(d.split_fraction > 0.0 && d.split_fraction < 1.0) {
            return Err(Error::Config("split_fraction must be in (0, 1)".into()));
        }
        if d.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.optim.lr, 2e-4);
        assert_eq!(cfg.optim.epochs, 9);
        assert_eq!(cfg.qfm.lambda1, 1e-7);
        assert!(cfg.qfm.clamp_cos && cfg.qfm.zscore_scores);
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file() {
        let cfg = TrainConfig::from_toml(
            "seed = 3\n[qfm]\nk_a = 6\nmode = \"quality-only\"\n[model.encoder]\nembed_dim = 32\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.qfm.k_a, 6);
        assert_eq!(cfg.qfm.mode, MatchMode::QualityOnly);
        assert_eq!(cfg.model.encoder.embed_dim, 32);
        assert_eq!(cfg.model.encoder.num_heads, 4);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("[qfm]\nlambda1 = 0.6\nlambda2 = 0.5\n").is_err());
        assert!(TrainConfig::from_toml("[optim]\nlr = 0.0\n").is_err());
        assert!(TrainConfig::from_toml("[optim]\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml("[data]\nsplit_fraction = 1.0\n").is_err());
        assert!(TrainConfig::from_toml("[model.encoder]\nembed_dim = 30\n").is_err());
    }

    #[test]
    fn schedule() {
        let o = OptimConfig::default();
        assert_eq!(o.lr_at(0), 2e-4);
        assert_eq!(o.lr_at(2), 2e-4);
        assert!((o.lr_at(3) - 2e-5).abs() < 1e-12);
        assert!((o.lr_at(8) - 2e-6).abs() < 1e-12);
    }
}
