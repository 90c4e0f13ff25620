//! Bidirectional InfoNCE, flooding, and pretraining batch construction.
//!
//! The similarity matrix is `S = V U^T / tau` for row-wise unit-norm `V`
//! (videos) and `U` (texts). Video-to-text loss reads `S` row by row,
//! text-to-video reads it column by column.

use std::collections::BTreeSet;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::synthdata::augment::{augment_video, AugmentPolicy};
use crate::synthdata::{temporal_subsample, Study, ViewTag, Vocab};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Fixed softmax temperature. Not learned.
    pub temperature: f64,
    /// Weight of the video-to-text direction; text-to-video gets `1 - lambda`.
    pub lambda: f64,
    pub flood_level: f64,
    pub batch_size: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.1,
            lambda: 0.5,
            flood_level: 0.5,
            batch_size: 8,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} must be in [0, 1]", self.lambda)));
        }
        if !(self.flood_level >= 0.0 && self.flood_level.is_finite()) {
            return Err(Error::Config(format!("flood level {} must be >= 0", self.flood_level)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} leaves no negatives", self.batch_size)));
        }
        Ok(())
    }
}

/// Aligned video and text embeddings; row `i` of `v` and `u` is a true pair.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBatch {
    pub v: Tensor,
    pub u: Tensor,
    pub study_ids: Vec<String>,
}

impl JointBatch {
    pub fn new(v: Tensor, u: Tensor, study_ids: Vec<String>) -> Result<Self> {
        let b = JointBatch { v, u, study_ids };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.study_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.study_ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.v.dims2();
        if self.v.rank() != 2 || self.u.shape() != [n, d] || self.study_ids.len() != n {
            return Err(Error::contract(format!(
                "batch shapes disagree: V {:?}, U {:?}, {} ids",
                self.v.shape(),
                self.u.shape(),
                self.study_ids.len()
            )));
        }
        let distinct: BTreeSet<&String> = self.study_ids.iter().collect();
        if distinct.len() != n {
            return Err(Error::contract("two batch items share a study id"));
        }
        for (name, t) in [("V", &self.v), ("U", &self.u)] {
            for r in 0..n {
                let norm = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::contract(format!("{name} row {r} has norm {norm}, expected 1")));
                }
            }
        }
        Ok(())
    }

    /// Combined loss without recording gradients.
    pub fn loss(&self, cfg: &ContrastiveConfig) -> Result<f64> {
        let tape = Tape::inference();
        let v = tape.constant(self.v.clone());
        let u = tape.constant(self.u.clone());
        Ok(combined_loss(v, u, cfg)?.item())
    }
}

fn check_pairs(v: Var<'_>, u: Var<'_>) -> Result<usize> {
    let (vs, us) = (v.shape(), u.shape());
    if vs.len() != 2 || vs != us {
        return Err(Error::contract(format!("embedding shapes {vs:?} and {us:?} must match")));
    }
    if vs[0] < 2 {
        return Err(Error::contract(format!("batch of {} has no negatives", vs[0])));
    }
    Ok(vs[0])
}

/// `[N, N]` similarity matrix `V U^T / tau`.
pub fn similarity<'t>(v: Var<'t>, u: Var<'t>, tau: f64) -> Var<'t> {
    v.matmul_nt(u).scale(1.0 / tau)
}

fn row_infonce(s: Var<'_>) -> Var<'_> {
    s.log_softmax_rows().diag().mean().neg()
}

/// Mean over videos of `-log softmax_k(<v_i, u_k> / tau)[i]`.
pub fn infonce_v2t<'t>(v: Var<'t>, u: Var<'t>, tau: f64) -> Result<Var<'t>> {
    check_pairs(v, u)?;
    Ok(row_infonce(similarity(v, u, tau)))
}

/// Mean over texts of `-log softmax_k(<v_k, u_i> / tau)[i]`.
pub fn infonce_t2v<'t>(v: Var<'t>, u: Var<'t>, tau: f64) -> Result<Var<'t>> {
    check_pairs(v, u)?;
    Ok(row_infonce(similarity(v, u, tau).transpose()))
}

/// `lambda * L_v2t + (1 - lambda) * L_t2v` from one shared similarity matrix.
pub fn combined_loss<'t>(v: Var<'t>, u: Var<'t>, cfg: &ContrastiveConfig) -> Result<Var<'t>> {
    check_pairs(v, u)?;
    let s = similarity(v, u, cfg.temperature);
    let v2t = row_infonce(s);
    let t2v = row_infonce(s.transpose());
    Ok(v2t.scale(cfg.lambda).add(t2v.scale(1.0 - cfg.lambda)))
}

/// `|loss - b| + b`. At `loss == b` the gradient is taken as +1.
pub fn flood(loss: Var<'_>, b: f64) -> Var<'_> {
    loss.add_scalar(-b).abs().add_scalar(b)
}

/// Scalar version of [`flood`].
pub fn flood_value(loss: f64, b: f64) -> f64 {
    (loss - b).abs() + b
}

/// Inputs for one pretraining step, before encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub batch_size: usize,
    /// Sentences drawn from each report.
    pub sentences: usize,
    /// Frames after uniform temporal subsampling.
    pub frames: usize,
    pub max_tokens: usize,
    pub augment: AugmentPolicy,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 8,
            sentences: 5,
            frames: 8,
            max_tokens: 48,
            augment: AugmentPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainBatch {
    pub videos: Vec<Tensor>,
    pub tokens: Vec<Vec<usize>>,
    pub study_ids: Vec<String>,
    pub views: Vec<ViewTag>,
    pub sentences: Vec<Vec<String>>,
}

/// `k` sentences: without replacement (random order) when the report has at
/// least `k`, otherwise with replacement.
pub fn sample_sentences(report: &[String], k: usize, rng: &mut impl Rng) -> Vec<String> {
    if report.is_empty() {
        return Vec::new();
    }
    if report.len() >= k {
        index::sample(rng, report.len(), k).into_iter().map(|i| report[i].clone()).collect()
    } else {
        (0..k).map(|_| report.choose(rng).expect("non-empty").clone()).collect()
    }
}

/// Pick `batch_size` distinct studies; for each, one random view (augmented
/// once for the whole clip, then temporally subsampled) and a random subset
/// of its report, tokenized.
pub fn build_pretrain_batch(
    studies: &[&Study],
    rng: &mut impl Rng,
    cfg: &BatchConfig,
    vocab: &Vocab,
) -> Result<PretrainBatch> {
    let distinct: BTreeSet<&str> = studies.iter().map(|s| s.study_id.as_str()).collect();
    if distinct.len() != studies.len() {
        return Err(Error::contract("candidate studies contain duplicate ids"));
    }
    if studies.len() < cfg.batch_size {
        return Err(Error::contract(format!(
            "{} distinct studies cannot fill a batch of {}",
            studies.len(),
            cfg.batch_size
        )));
    }
    let picks = index::sample(rng, studies.len(), cfg.batch_size);
    let mut batch = PretrainBatch {
        videos: Vec::with_capacity(cfg.batch_size),
        tokens: Vec::with_capacity(cfg.batch_size),
        study_ids: Vec::with_capacity(cfg.batch_size),
        views: Vec::with_capacity(cfg.batch_size),
        sentences: Vec::with_capacity(cfg.batch_size),
    };
    for i in picks {
        let s = studies[i];
        let v = s
            .videos
            .choose(rng)
            .ok_or_else(|| Error::contract(format!("study `{}` has no videos", s.study_id)))?;
        let sentences = sample_sentences(&s.report, cfg.sentences, rng);
        let aug_seed: u64 = rng.random();
        let clip = augment_video(&v.video, &cfg.augment, aug_seed)?;
        batch.videos.push(temporal_subsample(&clip, cfg.frames)?);
        batch.tokens.push(vocab.tokenize(&sentences, cfg.max_tokens));
        batch.study_ids.push(s.study_id.clone());
        batch.views.push(v.view);
        batch.sentences.push(sentences);
    }
    Ok(batch)
}
