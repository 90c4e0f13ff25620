use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{GradMap, ParamSet};
use super::Tensor;
use crate::{Error, Result};

/// How weight decay enters the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// Decay added to the gradient before the moment estimates (classic Adam + L2).
    Coupled,
    /// Decay applied straight to the parameter (AdamW).
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    /// Not given for the pretraining run this reproduces; the usual default is used.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    /// Pretraining settings: lr 4.8e-5, weight decay 1e-6, eps 1e-8.
    pub fn pretrain_reference() -> Self {
        AdamConfig {
            lr: 4.8e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub mode: DecayMode,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    /// Round parameters and moments to `f32` after every update.
    pub f32_storage: bool,
}

impl OptimState {
    pub fn adamw(config: AdamConfig) -> Self {
        Self::with_mode(config, DecayMode::Decoupled)
    }

    pub fn adam(config: AdamConfig) -> Self {
        Self::with_mode(config, DecayMode::Coupled)
    }

    fn with_mode(config: AdamConfig, mode: DecayMode) -> Self {
        OptimState {
            config,
            mode,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            f32_storage: false,
        }
    }

    pub fn f32_storage(mut self, on: bool) -> Self {
        self.f32_storage = on;
        self
    }

    /// One update of every trainable parameter at learning rate `lr`.
    ///
    /// Frozen parameters are not touched and keep no moments.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        let c = self.config;
        let t = self.step + 1;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let round = |x: f64| if self.f32_storage { x as f32 as f64 } else { x };

        let names: Vec<String> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect();
        // Validate everything before mutating anything.
        for name in &names {
            let p = params.tensor(name)?;
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} does not match parameter `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        for name in names {
            let p = params.tensor(&name)?.clone();
            let g = &grads[&name];
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let mut md = m.to_vec();
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let mut vd = v.to_vec();
            let mut pd = p.to_vec();
            for i in 0..pd.len() {
                let mut gi = g.data()[i];
                match self.mode {
                    DecayMode::Coupled => {
                        if c.weight_decay != 0.0 {
                            gi += c.weight_decay * pd[i];
                        }
                    }
                    DecayMode::Decoupled => {
                        if c.weight_decay != 0.0 {
                            pd[i] *= 1.0 - lr * c.weight_decay;
                        }
                    }
                }
                md[i] = round(c.beta1 * md[i] + (1.0 - c.beta1) * gi);
                vd[i] = round(c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi);
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] = round(pd[i] - lr * mhat / (vhat.sqrt() + c.eps));
            }
            *m = Tensor::from_parts(p.shape().to_vec(), md);
            *v = Tensor::from_parts(p.shape().to_vec(), vd);
            params.set_value(&name, Tensor::from_parts(p.shape().to_vec(), pd))?;
        }
        self.step = t;
        Ok(())
    }
}

/// Piecewise-constant learning rate with a single decay point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub base_lr: f64,
    pub decay_epoch: u64,
    pub factor: f64,
}

impl StepDecay {
    /// Reference schedule: 4.8e-5, multiplied by 0.1 at epoch 300.
    pub fn pretrain_reference() -> Self {
        StepDecay {
            base_lr: 4.8e-5,
            decay_epoch: 300,
            factor: 0.1,
        }
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        if epoch >= self.decay_epoch {
            self.base_lr * self.factor
        } else {
            self.base_lr
        }
    }
}
