//! Run configuration: one TOML document covering every module, with dotted
//! `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::{BatchConfig, ContrastiveConfig};
use crate::diffcore::{AdamConfig, StepDecay};
use crate::encoders::{EncoderConfig, FreezeMode};
use crate::evalstats::TsneConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunTask {
    Pretrain,
    LvefRegression,
    DiseaseClassification,
    ZeroShotEmbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epoch at which the learning rate is multiplied by `decay_factor`.
    pub decay_epoch: u64,
    pub decay_factor: f64,
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base_lr: self.lr,
            decay_epoch: self.decay_epoch,
            factor: self.decay_factor,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay_factor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {what} optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub checkpoint_interval: u64,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    /// Desk budget. The reference run used lr 4.8e-5 and a decay at epoch 300
    /// over 600 epochs; 30 desk epochs need a larger step and an earlier decay.
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            checkpoint_interval: 10,
            optim: OptimConfig {
                lr: 1e-3,
                weight_decay: 1e-6,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                decay_epoch: 20,
                decay_factor: 0.1,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub freeze_mode: FreezeMode,
    /// Fraction of the training split used, in `(0, 1]`.
    pub data_fraction: f64,
    pub subsample_seed: u64,
    /// Optimizer steps for regression.
    pub steps: u64,
    /// Epochs for classification.
    pub epochs: u64,
    /// Bags per optimizer step.
    pub bags_per_step: usize,
    /// Validation interval in steps (regression).
    pub eval_every: u64,
    /// Fraction of short-axis slices kept per study for regression bags.
    pub sax_fraction: f64,
    pub huber_delta: f64,
    /// Flag trained by classification runs.
    pub label: String,
    /// Apply training-time augmentation to bag videos.
    pub augment: bool,
    pub regression_optim: OptimConfig,
    pub classification_optim: OptimConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let optim = |lr, weight_decay| OptimConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_epoch: 1_000_000,
            decay_factor: 1.0,
        };
        FinetuneConfig {
            freeze_mode: FreezeMode::Finetune,
            data_fraction: 1.0,
            subsample_seed: 0,
            steps: 600,
            epochs: 15,
            bags_per_step: 8,
            eval_every: 50,
            sax_fraction: 0.5,
            huber_delta: 1.0,
            label: "low_ef".into(),
            augment: false,
            regression_optim: optim(1e-3, 0.01),
            classification_optim: optim(1e-3, 5e-4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub batch: BatchConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub tsne: TsneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::desk();
        let batch = BatchConfig {
            frames: encoder.video.frames,
            max_tokens: encoder.text.max_tokens,
            ..BatchConfig::default()
        };
        RunConfig {
            seed: 0,
            contrastive: ContrastiveConfig {
                batch_size: batch.batch_size,
                ..ContrastiveConfig::default()
            },
            encoder,
            batch,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            tsne: TsneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.contrastive.validate()?;
        self.batch.augment.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch.batch_size != self.contrastive.batch_size {
            return Err(Error::Config(format!(
                "batch.batch_size {} differs from contrastive.batch_size {}",
                self.batch.batch_size, self.contrastive.batch_size
            )));
        }
        if self.batch.frames != self.encoder.video.frames {
            return Err(Error::Config(format!(
                "batch.frames {} differs from encoder.video.frames {}",
                self.batch.frames, self.encoder.video.frames
            )));
        }
        if self.batch.max_tokens > self.encoder.text.max_tokens || self.batch.sentences == 0 {
            return Err(Error::Config("batch token/sentence settings do not fit the text encoder".into()));
        }
        if self.pretrain.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        self.pretrain.optim.validate("pretrain")?;
        let f = &self.finetune;
        if !(f.data_fraction > 0.0 && f.data_fraction <= 1.0) {
            return Err(Error::Config(format!("data_fraction {} must be in (0, 1]", f.data_fraction)));
        }
        if !(0.0..=1.0).contains(&f.sax_fraction) || f.bags_per_step == 0 || f.eval_every == 0 {
            return Err(Error::Config("invalid finetune sampling settings".into()));
        }
        if !(f.huber_delta > 0.0) {
            return Err(Error::Config(format!("huber_delta {} must be > 0", f.huber_delta)));
        }
        f.regression_optim.validate("regression")?;
        f.classification_optim.validate("classification")?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Read a TOML file. Absent sections keep their defaults; unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let mut base = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        let user: toml::Table = std::fs::read_to_string(path)?
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut base, user, "")?;
        base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `key=value` where `key` is a dotted path such as `pretrain.epochs`.
    /// The value is parsed as a TOML literal, falling back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value: toml::Value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut table;
        for (i, p) in parts.iter().enumerate() {
            if i + 1 == parts.len() {
                if !cur.contains_key(*p) {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
                cur.insert(p.to_string(), value.clone());
            } else {
                cur = cur
                    .get_mut(*p)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
        }
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(Error::Config(format!("unknown config key `{path}`"))),
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}
