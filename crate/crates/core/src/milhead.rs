//! Gated-attention multi-instance pooling over the views of a study, and the
//! regression and classification heads on top.
//!
//! Parameters live under `head.`:
//!
//! | name | shape |
//! |---|---|
//! | `head.norm.{g,b}` | `[d]`, classification only |
//! | `head.attn.V`, `head.attn.U` | `[m, d]` |
//! | `head.attn.w` | `[1, m]` |
//! | `head.out.w`, `head.out.b` | `[1, d]`, `[1]` |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{init, Binder, ParamSet, Tape, Tensor, Var};
use crate::encoders::nn;
use crate::synthdata::ViewTag;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub task: Task,
    pub layernorm_pre: bool,
    pub pos_weight: f64,
    pub huber_delta: f64,
    /// Attention hidden size `m`.
    pub hidden: usize,
}

impl HeadConfig {
    pub fn regression(joint_dim: usize) -> Self {
        HeadConfig {
            task: Task::Regression,
            layernorm_pre: false,
            pos_weight: 1.0,
            huber_delta: 1.0,
            hidden: (joint_dim / 2).max(1),
        }
    }

    pub fn classification(joint_dim: usize, pos_weight: f64) -> Self {
        HeadConfig {
            task: Task::Classification,
            layernorm_pre: true,
            pos_weight,
            huber_delta: 1.0,
            hidden: (joint_dim / 2).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return Err(Error::Config(format!("pos_weight {} must be > 0", self.pos_weight)));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::Config(format!("huber_delta {} must be > 0", self.huber_delta)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("attention hidden size must be positive".into()));
        }
        Ok(())
    }
}

/// Instance embeddings of one study, one row per view video.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub embeddings: Tensor,
    pub views: Vec<ViewTag>,
}

impl Bag {
    pub fn new(embeddings: Tensor, views: Vec<ViewTag>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != views.len() {
            return Err(Error::contract(format!(
                "bag of {} views needs a [K, d] matrix, got {:?}",
                views.len(),
                embeddings.shape()
            )));
        }
        Ok(Bag { embeddings, views })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Add head parameters for input width `d`.
pub fn init_head(ps: &mut ParamSet, cfg: &HeadConfig, d: usize, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    if cfg.layernorm_pre {
        nn::add_layernorm(ps, "head.norm", d)?;
    }
    ps.insert("head.attn.V", init::xavier(rng, cfg.hidden, d))?;
    ps.insert("head.attn.U", init::xavier(rng, cfg.hidden, d))?;
    ps.insert("head.attn.w", init::xavier(rng, 1, cfg.hidden))?;
    nn::add_linear(ps, rng, "head.out", 1, d, true)
}

/// Scalar count of the head for input width `d`.
pub fn head_scalar_count(cfg: &HeadConfig, d: usize) -> usize {
    let norm = if cfg.layernorm_pre { 2 * d } else { 0 };
    norm + 2 * cfg.hidden * d + cfg.hidden + d + 1
}

/// Pre-softmax scores `w^T (tanh(V h_k) * sigm(U h_k))` as a `[1, K]` row.
pub fn attention_scores<'t>(b: &Binder<'t, '_>, h: Var<'t>) -> Var<'t> {
    let k = h.shape()[0];
    let gate = h.matmul_nt(b.p("head.attn.V")).tanh().mul(h.matmul_nt(b.p("head.attn.U")).sigmoid());
    gate.matmul_nt(b.p("head.attn.w")).reshape(&[1, k])
}

/// Instances after the optional layer norm.
pub fn prepare_instances<'t>(b: &Binder<'t, '_>, h: Var<'t>, cfg: &HeadConfig) -> Var<'t> {
    if cfg.layernorm_pre {
        nn::layernorm(b, "head.norm", h)
    } else {
        h
    }
}

/// Attention weights `[1, K]` over the (prepared) instances.
pub fn gated_attention<'t>(b: &Binder<'t, '_>, h: Var<'t>) -> Var<'t> {
    attention_scores(b, h).softmax_rows()
}

/// `sum_k a_k h_k` as a `[1, d]` row.
pub fn attention_pool<'t>(a: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
    let av = a.value();
    let k = h.shape()[0];
    if av.len() != k {
        return Err(Error::contract(format!("{} weights for {k} instances", av.len())));
    }
    let total: f64 = av.data().iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("attention weights sum to {total}, expected 1")));
    }
    Ok(a.reshape(&[1, k]).matmul(h))
}

/// Linear output on a `[n, d]` feature: logits for classification, values for regression.
pub fn head_forward<'t>(b: &Binder<'t, '_>, feature: Var<'t>) -> Var<'t> {
    nn::linear(b, "head.out", feature)
}

/// Recorded pieces of one bag's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MilOutput<'t> {
    pub weights: Var<'t>,
    pub pooled: Var<'t>,
    /// `[1, 1]`: logit (classification) or value (regression).
    pub output: Var<'t>,
}

pub fn mil_forward<'t>(b: &Binder<'t, '_>, h: Var<'t>, cfg: &HeadConfig) -> Result<MilOutput<'t>> {
    if h.shape().len() != 2 || h.shape()[0] == 0 {
        return Err(Error::contract(format!("bag must be [K>=1, d], got {:?}", h.shape())));
    }
    let x = prepare_instances(b, h, cfg);
    let weights = gated_attention(b, x);
    let pooled = attention_pool(weights, x)?;
    Ok(MilOutput {
        weights,
        pooled,
        output: head_forward(b, pooled),
    })
}

/// Inference: `(prediction, attention weights)`. Classification predictions are probabilities.
pub fn predict_bag(params: &ParamSet, bag: &Bag, cfg: &HeadConfig) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::inference();
    let b = Binder::new(&tape, params);
    let out = mil_forward(&b, tape.constant(bag.embeddings.clone()), cfg)?;
    let y = out.output.item();
    let pred = match cfg.task {
        Task::Classification => crate::diffcore::ops::sigmoid(y),
        Task::Regression => y,
    };
    Ok((pred, out.weights.value().to_vec()))
}

/// Mean Huber loss of `pred - target`.
pub fn huber_loss<'t>(pred: Var<'t>, target: &[f64], delta: f64) -> Var<'t> {
    pred.huber(target, delta).mean()
}

/// Mean of `-(w y log p + (1 - y) log(1 - p))` with `p = sigmoid(logit)`,
/// evaluated as `w y softplus(-z) + (1 - y) softplus(z)`.
pub fn weighted_bce<'t>(logits: Var<'t>, labels: &[f64], pos_weight: f64) -> Var<'t> {
    let n = labels.len();
    let tape = logits.tape();
    let z = logits.reshape(&[n]);
    let y = tape.constant(Tensor::vector(labels.iter().map(|&l| l * pos_weight).collect()));
    let not_y = tape.constant(Tensor::vector(labels.iter().map(|&l| 1.0 - l).collect()));
    z.neg().softplus().mul(y).add(z.softplus().mul(not_y)).mean()
}

/// `#negative / #positive` over the training labels.
pub fn pos_weight_from_labels(labels: &[bool], label: &str) -> Result<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 {
        return Err(Error::Config(format!("no positive `{label}` studies in the training split")));
    }
    Ok((labels.len() - pos) as f64 / pos as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(task: Task) -> (ParamSet, HeadConfig) {
        let cfg = match task {
            Task::Regression => HeadConfig::regression(4),
            Task::Classification => HeadConfig::classification(4, 1.0),
        };
        let mut ps = ParamSet::new();
        init_head(&mut ps, &cfg, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (ps, cfg)
    }

    #[test]
    fn singleton_bag_has_unit_weight() {
        let (ps, cfg) = head(Task::Regression);
        let bag = Bag::new(Tensor::matrix(1, 4, vec![0.1, -0.2, 0.3, 0.5]).unwrap(), vec![ViewTag::TwoChamber]).unwrap();
        let (_, a) = predict_bag(&ps, &bag, &cfg).unwrap();
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn hand_pooling() {
        let tape = Tape::inference();
        let a = tape.constant(Tensor::matrix(1, 2, vec![0.25, 0.75]).unwrap());
        let h = tape.constant(Tensor::matrix(2, 2, vec![0.0, 4.0, 4.0, 0.0]).unwrap());
        assert_eq!(attention_pool(a, h).unwrap().value().data(), &[3.0, 1.0]);
        let bad = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.6]).unwrap());
        assert!(matches!(attention_pool(bad, h), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_head_outputs() {
        let (mut ps, cfg) = head(Task::Classification);
        ps.set_value("head.out.w", Tensor::zeros(&[1, 4])).unwrap();
        let bag = Bag::new(Tensor::full(&[2, 4], 0.3), vec![ViewTag::TwoChamber, ViewTag::FourChamber]).unwrap();
        assert_eq!(predict_bag(&ps, &bag, &cfg).unwrap().0, 0.5);
        let (mut ps, cfg) = head(Task::Regression);
        ps.set_value("head.out.w", Tensor::zeros(&[1, 4])).unwrap();
        ps.set_value("head.out.b", Tensor::vector(vec![1.7])).unwrap();
        assert_eq!(predict_bag(&ps, &bag, &cfg).unwrap().0, 1.7);
    }

    #[test]
    fn bce_cases() {
        let tape = Tape::inference();
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let ln2 = 2f64.ln();
        assert!((weighted_bce(z, &[1.0], 1.0).item() - ln2).abs() < 1e-15);
        assert!((weighted_bce(z, &[0.0], 3.0).item() - ln2).abs() < 1e-15);
        assert!((weighted_bce(z, &[1.0], 2.0).item() - 2.0 * ln2).abs() < 1e-15);
    }

    #[test]
    fn pos_weight_counts() {
        assert_eq!(pos_weight_from_labels(&[true, false, false, false], "x").unwrap(), 3.0);
        let e = pos_weight_from_labels(&[false, false], "dilation").unwrap_err();
        assert!(e.to_string().contains("dilation"));
    }

    #[test]
    fn head_count_matches_parameters() {
        for task in [Task::Regression, Task::Classification] {
            let (ps, cfg) = head(task);
            assert_eq!(ps.scalar_count(), head_scalar_count(&cfg, 4));
        }
    }
}
