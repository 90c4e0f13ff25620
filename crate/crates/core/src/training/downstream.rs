//! Downstream runs: multi-instance regression and classification on top of
//! the video encoder, and frozen zero-shot embedding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::{RunConfig, RunTask};
use super::manifest::RunManifest;
use crate::diffcore::{forward_backward, Binder, OptimState, ParamSet, Tape, Tensor, Var};
use crate::encoders::{
    encode_video, freeze_plan, init_model, project, project_tensor, video_forward, FreezeMode, Modality, VIDEO_PROJ,
};
use crate::evalstats::io::{write_json, write_pairs, write_scores};
use crate::evalstats::{
    auroc, bland_altman, delong_ci, regression_metrics, samples, AgreementResult, RegressionMetrics, RocResult,
    ScoredSample,
};
use crate::milhead::{huber_loss, init_head, mil_forward, predict_bag, weighted_bce, Bag, HeadConfig};
use crate::milhead::{head_scalar_count, pos_weight_from_labels};
use crate::synthdata::phantom::LOW_EF_BELOW;
use crate::synthdata::{augment_video, derive_seed, temporal_subsample, Dataset, Split, Study, ViewTag};
use crate::{Error, Result};

const SAX_STREAM: u64 = 20;
const REG_STEP_STREAM: u64 = 21;
const HEAD_STREAM: u64 = 22;
const CLS_SHUFFLE_STREAM: u64 = 23;
const AUG_STREAM: u64 = 24;

/// Every comparison against "random" initialization stands in for the
/// pretrained video baseline, whose weights are not available here.
pub const BASELINE_NOTE: &str =
    "baseline is a randomly initialized video encoder; it replaces an externally pretrained video model";

/// Where the video encoder weights come from.
#[derive(Clone, Debug)]
pub enum Init {
    Random,
    Pretrained { params: ParamSet, source: String },
}

impl Init {
    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        Ok(Init::Pretrained {
            params: ck.params,
            source: dir.display().to_string(),
        })
    }

    pub fn label(&self) -> String {
        match self {
            Init::Random => "random".into(),
            Init::Pretrained { source, .. } => source.clone(),
        }
    }
}

/// Video-encoder parameters for a downstream run. Text parameters are dropped.
pub fn encoder_params(init: &Init, cfg: &RunConfig) -> Result<ParamSet> {
    let reference = init_model(&cfg.encoder, cfg.seed)?;
    let source = match init {
        Init::Random => &reference,
        Init::Pretrained { params, .. } => params,
    };
    let mut ps = ParamSet::new();
    for (name, p) in reference.iter().filter(|(n, _)| n.starts_with("video.")) {
        let v = source
            .tensor(name)
            .map_err(|_| Error::contract(format!("initial weights lack `{name}`")))?;
        if v.shape() != p.value.shape() {
            return Err(Error::contract(format!(
                "initial weight `{name}` has shape {:?}, encoder config expects {:?}",
                v.shape(),
                p.value.shape()
            )));
        }
        ps.insert(name.clone(), v.clone())?;
    }
    ps.round_to_f32();
    Ok(ps)
}

/// The first `ceil(fraction * n)` ids after a seeded shuffle of the sorted ids.
pub fn subset_train(ids: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("data_fraction {fraction} must be in (0, 1]")));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((fraction * ids.len() as f64).ceil() as usize).min(ids.len());
    sorted.truncate(k);
    Ok(sorted)
}

/// Video indices in a regression bag: every long-axis view and a seeded
/// `ceil(sax_fraction * n_sax)` short-axis slices, fixed per study.
pub fn regression_views(study: &Study, sax_fraction: f64, seed: u64) -> Vec<usize> {
    let (sax, mut keep): (Vec<usize>, Vec<usize>) = (0..study.videos.len()).partition(|&i| study.videos[i].view.is_short_axis());
    let k = ((sax_fraction * sax.len() as f64).ceil() as usize).min(sax.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SAX_STREAM, study.seed));
    keep.extend(index::sample(&mut rng, sax.len(), k).into_iter().map(|i| sax[i]));
    keep.sort_unstable();
    keep
}

/// One study's bag before encoding.
#[derive(Clone, Debug)]
struct BagSource<'a> {
    study: &'a Study,
    views: Vec<ViewTag>,
    clips: Vec<Tensor>,
}

impl<'a> BagSource<'a> {
    fn new(study: &'a Study, idx: &[usize], frames: usize) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::contract(format!("study `{}` contributes no videos", study.study_id)));
        }
        let clips = idx
            .iter()
            .map(|&i| temporal_subsample(&study.videos[i].video, frames))
            .collect::<Result<_>>()?;
        Ok(BagSource {
            study,
            views: idx.iter().map(|&i| study.videos[i].view).collect(),
            clips,
        })
    }

    fn augmented(&self, cfg: &RunConfig, seed: u64) -> Result<Vec<Tensor>> {
        self.clips
            .iter()
            .enumerate()
            .map(|(k, c)| augment_video(c, &cfg.batch.augment, derive_seed(seed, AUG_STREAM, k as u64)))
            .collect()
    }
}

fn make_bags<'d>(studies: &[&'d Study], views: impl Fn(&Study) -> Vec<usize>, frames: usize) -> Result<Vec<BagSource<'d>>> {
    studies.iter().map(|s| BagSource::new(s, &views(s), frames)).collect()
}

/// Trunk representations `[K, d_final]` without gradients.
fn trunk_features(params: &ParamSet, cfg: &RunConfig, clips: &[Tensor]) -> Result<Tensor> {
    let rows = clips
        .iter()
        .map(|c| encode_video(params, &cfg.encoder, c))
        .collect::<Result<Vec<_>>>()?;
    let d = rows[0].len();
    Tensor::matrix(rows.len(), d, rows.iter().flat_map(|r| r.data().iter().copied()).collect())
}

/// Projected instances `[K, joint_dim]` without gradients.
fn instance_embeddings(params: &ParamSet, trunk: &Tensor) -> Result<Tensor> {
    let (k, _) = trunk.dims2();
    let mut data = Vec::new();
    for i in 0..k {
        let row = Tensor::vector(trunk.row(i).to_vec());
        data.extend(project_tensor(params, VIDEO_PROJ, &row, Modality::Video)?.vector.to_vec());
    }
    let d = data.len() / k;
    Tensor::matrix(k, d, data)
}

/// Per-study prediction with the head's view weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagPrediction {
    pub study_id: String,
    /// Predicted ef for regression, probability for classification.
    pub prediction: f64,
    /// Reference ef, or 0/1 label.
    pub truth: f64,
    pub views: Vec<ViewTag>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTest {
    pub metrics: RegressionMetrics,
    pub agreement: AgreementResult,
    /// Detection of ef below the low-ef threshold, scored by `1 - prediction`.
    pub hfref: Option<RocResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationTest {
    pub label: String,
    pub pos_weight: f64,
    pub roc: Option<RocResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: RunTask,
    pub init: String,
    pub baseline_note: String,
    pub freeze_mode: FreezeMode,
    pub data_fraction: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub trainable_scalars: usize,
    /// Step (regression) or epoch (classification) of the selected model.
    pub selected_at: u64,
    pub val_mae: Option<f64>,
    pub val_mse: Option<f64>,
    pub val_auroc: Option<f64>,
    pub regression: Option<RegressionTest>,
    pub classification: Option<ClassificationTest>,
}

#[derive(Clone, Debug)]
pub struct DownstreamRun {
    pub params: ParamSet,
    pub head: HeadConfig,
    pub report: MetricsReport,
    pub predictions: Vec<BagPrediction>,
    pub train_ids: Vec<String>,
}

/// Shared state of a downstream training run.
struct Trainer<'a> {
    cfg: &'a RunConfig,
    params: ParamSet,
    head: HeadConfig,
    optim: OptimState,
    /// Trunk features, valid for the whole run when the trunk is frozen.
    cache: BTreeMap<String, Tensor>,
    trunk_frozen: bool,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a RunConfig, init: &Init, head: HeadConfig, bias: f64, optim: OptimState) -> Result<Self> {
        let mode = cfg.finetune.freeze_mode;
        if mode == FreezeMode::Frozen {
            return Err(Error::contract(
                "freeze_mode=frozen leaves the downstream head untrained; use finetune or transfer",
            ));
        }
        let mut params = encoder_params(init, cfg)?;
        let d = cfg.encoder.joint_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, HEAD_STREAM, 0));
        init_head(&mut params, &head, d, &mut rng)?;
        params.set_value("head.out.b", Tensor::vector(vec![bias]))?;
        params.round_to_f32();
        freeze_plan(&mut params, mode);
        if mode == FreezeMode::Finetune {
            let proj = params.tensor(&format!("{VIDEO_PROJ}.w"))?.len() + params.tensor(&format!("{VIDEO_PROJ}.b"))?.len();
            let expect = proj + head_scalar_count(&head, d);
            let got = params.trainable_scalar_count();
            if got != expect {
                return Err(Error::contract(format!(
                    "finetune mode trains {got} scalars, expected {expect} (projection {proj} + head)"
                )));
            }
        }
        Ok(Trainer {
            cfg,
            params,
            head,
            optim: optim.f32_storage(true),
            cache: BTreeMap::new(),
            trunk_frozen: mode == FreezeMode::Finetune,
        })
    }

    fn cached_trunk(&mut self, src: &BagSource) -> Result<Tensor> {
        if self.trunk_frozen {
            if let Some(t) = self.cache.get(&src.study.study_id) {
                return Ok(t.clone());
            }
            let t = trunk_features(&self.params, self.cfg, &src.clips)?;
            self.cache.insert(src.study.study_id.clone(), t.clone());
            Ok(t)
        } else {
            trunk_features(&self.params, self.cfg, &src.clips)
        }
    }

    /// One optimizer step on `bags`; `loss` turns the `[B, 1]` outputs into a scalar.
    fn step(
        &mut self,
        bags: &[&BagSource],
        step_seed: u64,
        lr: f64,
        loss: impl for<'t> Fn(Var<'t>) -> Var<'t>,
    ) -> Result<f64> {
        let augment = self.cfg.finetune.augment;
        let mut trunks = Vec::with_capacity(bags.len());
        if self.trunk_frozen {
            for (i, src) in bags.iter().enumerate() {
                let t = if augment {
                    trunk_features(&self.params, self.cfg, &src.augmented(self.cfg, derive_seed(step_seed, 0, i as u64))?)?
                } else {
                    self.cached_trunk(src)?
                };
                trunks.push(Some(t));
            }
        } else {
            trunks.resize(bags.len(), None);
        }
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let mut outs = Vec::with_capacity(bags.len());
        for (i, src) in bags.iter().enumerate() {
            let trunk = match &trunks[i] {
                Some(t) => tape.constant(t.clone()),
                None => {
                    let clips = if augment {
                        src.augmented(self.cfg, derive_seed(step_seed, 0, i as u64))?
                    } else {
                        src.clips.clone()
                    };
                    let reps = clips
                        .iter()
                        .map(|c| video_forward(&b, &self.cfg.encoder, c, None))
                        .collect::<Result<Vec<_>>>()?;
                    Var::concat_rows(&reps)
                }
            };
            let h = project(&b, VIDEO_PROJ, trunk)?;
            outs.push(mil_forward(&b, h, &self.head)?.output);
        }
        let l = loss(Var::concat_rows(&outs));
        let value = l.item();
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: "downstream".into(),
                detail: format!("non-finite loss {value} at step {}", self.optim.step),
            });
        }
        let grads = forward_backward(l, &b)?;
        drop(b);
        self.optim.step(&mut self.params, &grads, lr)?;
        Ok(value)
    }

    fn predict(&mut self, sources: &[BagSource], truth: impl Fn(&Study) -> f64) -> Result<Vec<BagPrediction>> {
        let mut out = Vec::with_capacity(sources.len());
        for src in sources {
            let trunk = self.cached_trunk(src)?;
            let bag = Bag::new(instance_embeddings(&self.params, &trunk)?, src.views.clone())?;
            let (prediction, weights) = predict_bag(&self.params, &bag, &self.head)?;
            out.push(BagPrediction {
                study_id: src.study.study_id.clone(),
                prediction,
                truth: truth(src.study),
                views: src.views.clone(),
                weights,
            });
        }
        Ok(out)
    }
}

struct Splits<'d> {
    train: Vec<&'d Study>,
    val: Vec<&'d Study>,
    test: Vec<&'d Study>,
}

fn splits<'d>(cfg: &RunConfig, data: &'d Dataset) -> Result<Splits<'d>> {
    let ids = data.manifest.splits.get(Split::Train);
    let subset = subset_train(ids, cfg.finetune.data_fraction, cfg.finetune.subsample_seed)?;
    let train = subset.iter().map(|id| data.study(id)).collect::<Result<Vec<_>>>()?;
    let val = data.split(Split::Val)?;
    let test = data.split(Split::Test)?;
    if val.len() < 2 || test.len() < 2 {
        return Err(Error::Config(format!(
            "downstream runs need at least 2 validation and 2 test studies (have {} and {})",
            val.len(),
            test.len()
        )));
    }
    Ok(Splits { train, val, test })
}

fn pairs_of(p: &[BagPrediction]) -> (Vec<f64>, Vec<f64>) {
    (p.iter().map(|x| x.prediction).collect(), p.iter().map(|x| x.truth).collect())
}

fn roc_with_ci(s: &[ScoredSample]) -> Option<RocResult> {
    delong_ci(s).or_else(|_| auroc(s)).ok()
}

/// Multi-instance ef regression with Huber loss; the model with the lowest
/// validation MAE is kept.
pub fn finetune_regression(cfg: &RunConfig, data: &Dataset, init: &Init) -> Result<DownstreamRun> {
    cfg.validate()?;
    let f = &cfg.finetune;
    let sp = splits(cfg, data)?;
    let frames = cfg.encoder.video.frames;
    let bags = |studies| make_bags(studies, |s| regression_views(s, f.sax_fraction, cfg.seed), frames);
    let (train, val, test) = (bags(&sp.train)?, bags(&sp.val)?, bags(&sp.test)?);
    let targets: Vec<f64> = sp.train.iter().map(|s| s.phenotype.ef).collect();
    let mean_ef = targets.iter().sum::<f64>() / targets.len() as f64;
    let head = HeadConfig {
        huber_delta: f.huber_delta,
        ..HeadConfig::regression(cfg.encoder.joint_dim)
    };
    let optim = OptimState::adamw(f.regression_optim.adam());
    let mut tr = Trainer::new(cfg, init, head, mean_ef, optim)?;
    let trainable = tr.params.trainable_scalar_count();
    let schedule = f.regression_optim.schedule();
    let per_step = f.bags_per_step.min(train.len());
    let ef = |s: &Study| s.phenotype.ef;

    let mut best: Option<(f64, f64, u64, ParamSet)> = None;
    for step in 0..f.steps {
        let seed = derive_seed(cfg.seed, REG_STEP_STREAM, step);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<&BagSource> = index::sample(&mut rng, train.len(), per_step).into_iter().map(|i| &train[i]).collect();
        let y: Vec<f64> = picks.iter().map(|b| b.study.phenotype.ef).collect();
        let epoch = step * per_step as u64 / train.len() as u64;
        let delta = f.huber_delta;
        tr.step(&picks, seed, schedule.lr_at(epoch), |out| huber_loss(out, &y, delta))?;
        let done = step + 1;
        if done % f.eval_every == 0 || done == f.steps {
            let (p, t) = pairs_of(&tr.predict(&val, ef)?);
            let m = regression_metrics(&p, &t)?;
            log::debug!("step {done}: val MAE {:.4}", m.mae);
            if best.as_ref().map_or(true, |b| m.mae < b.0) {
                best = Some((m.mae, m.mse, done, tr.params.clone()));
            }
        }
    }
    let (val_mae, val_mse, selected_at) = match best {
        Some((mae, mse, at, params)) => {
            tr.params = params;
            (Some(mae), Some(mse), at)
        }
        None => {
            let (p, t) = pairs_of(&tr.predict(&val, ef)?);
            let m = regression_metrics(&p, &t)?;
            (Some(m.mae), Some(m.mse), 0)
        }
    };
    let predictions = tr.predict(&test, ef)?;
    let (p, t) = pairs_of(&predictions);
    let low: Vec<bool> = t.iter().map(|&e| e < LOW_EF_BELOW).collect();
    let scores: Vec<f64> = p.iter().map(|&x| 1.0 - x).collect();
    let regression = RegressionTest {
        metrics: regression_metrics(&p, &t)?,
        agreement: bland_altman(&p, &t)?,
        hfref: roc_with_ci(&samples(&scores, &low)),
    };
    Ok(DownstreamRun {
        report: MetricsReport {
            task: RunTask::LvefRegression,
            init: init.label(),
            baseline_note: BASELINE_NOTE.into(),
            freeze_mode: f.freeze_mode,
            data_fraction: f.data_fraction,
            n_train: train.len(),
            n_val: val.len(),
            n_test: test.len(),
            trainable_scalars: trainable,
            selected_at,
            val_mae,
            val_mse,
            val_auroc: None,
            regression: Some(regression),
            classification: None,
        },
        params: tr.params,
        head: tr.head,
        predictions,
        train_ids: sp.train.iter().map(|s| s.study_id.clone()).collect(),
    })
}

/// Binary multi-instance classifier for `cfg.finetune.label` with weighted
/// cross-entropy; the epoch with the best validation AUROC is kept.
pub fn finetune_classification(cfg: &RunConfig, data: &Dataset, init: &Init) -> Result<DownstreamRun> {
    cfg.validate()?;
    let f = &cfg.finetune;
    let sp = splits(cfg, data)?;
    let frames = cfg.encoder.video.frames;
    let label = |s: &Study| -> Result<bool> { s.label(&f.label) };
    let train_labels = sp.train.iter().map(|s| label(s)).collect::<Result<Vec<_>>>()?;
    let pos_weight = pos_weight_from_labels(&train_labels, &f.label)?;
    let bags = |studies| make_bags(studies, |s| (0..s.videos.len()).collect(), frames);
    let (train, val, test) = (bags(&sp.train)?, bags(&sp.val)?, bags(&sp.test)?);
    let head = HeadConfig::classification(cfg.encoder.joint_dim, pos_weight);
    let optim = OptimState::adamw(f.classification_optim.adam());
    let mut tr = Trainer::new(cfg, init, head, 0.0, optim)?;
    let trainable = tr.params.trainable_scalar_count();
    let schedule = f.classification_optim.schedule();
    let as_f64 = |s: &Study| if s.label(&f.label).unwrap_or(false) { 1.0 } else { 0.0 };

    let mut step = 0u64;
    let mut best: Option<(Option<f64>, u64, ParamSet)> = None;
    for epoch in 0..f.epochs {
        let mut order: Vec<&BagSource> = train.iter().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, CLS_SHUFFLE_STREAM, epoch)));
        for chunk in order.chunks(f.bags_per_step) {
            let y: Vec<f64> = chunk.iter().map(|b| as_f64(b.study)).collect();
            let seed = derive_seed(cfg.seed, REG_STEP_STREAM, step);
            tr.step(chunk, seed, schedule.lr_at(epoch), |out| weighted_bce(out, &y, pos_weight))?;
            step += 1;
        }
        let preds = tr.predict(&val, as_f64)?;
        let s: Vec<ScoredSample> = preds.iter().map(|p| ScoredSample::new(p.prediction, p.truth > 0.5)).collect();
        let auc = auroc(&s).ok().map(|r| r.auc);
        let better = match (&best, auc) {
            (None, _) => true,
            (Some((Some(b), _, _)), Some(a)) => a > *b,
            (Some((None, _, _)), _) => true,
            (Some((Some(_), _, _)), None) => false,
        };
        if better {
            best = Some((auc, epoch + 1, tr.params.clone()));
        }
    }
    let (val_auroc, selected_at) = match best {
        Some((auc, at, params)) => {
            tr.params = params;
            (auc, at)
        }
        None => (None, 0),
    };
    let predictions = tr.predict(&test, as_f64)?;
    let s: Vec<ScoredSample> = predictions.iter().map(|p| ScoredSample::new(p.prediction, p.truth > 0.5)).collect();
    Ok(DownstreamRun {
        report: MetricsReport {
            task: RunTask::DiseaseClassification,
            init: init.label(),
            baseline_note: BASELINE_NOTE.into(),
            freeze_mode: f.freeze_mode,
            data_fraction: f.data_fraction,
            n_train: train.len(),
            n_val: val.len(),
            n_test: test.len(),
            trainable_scalars: trainable,
            selected_at,
            val_mae: None,
            val_mse: None,
            val_auroc,
            regression: None,
            classification: Some(ClassificationTest {
                label: f.label.clone(),
                pos_weight,
                roc: roc_with_ci(&s),
            }),
        },
        params: tr.params,
        head: tr.head,
        predictions,
        train_ids: sp.train.iter().map(|s| s.study_id.clone()).collect(),
    })
}

/// Write `metrics.json`, `predictions.csv`, `attention.csv`, the trained
/// model under `model/` and `run.json`.
pub fn write_downstream(run: &DownstreamRun, cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &run.report)?;
    match run.report.task {
        RunTask::DiseaseClassification => {
            let rows: Vec<(String, ScoredSample)> = run
                .predictions
                .iter()
                .map(|p| (p.study_id.clone(), ScoredSample::new(p.prediction, p.truth > 0.5)))
                .collect();
            write_scores(&out.join("predictions.csv"), &rows)?;
        }
        _ => {
            let rows: Vec<(String, f64, f64)> =
                run.predictions.iter().map(|p| (p.study_id.clone(), p.prediction, p.truth)).collect();
            write_pairs(&out.join("predictions.csv"), &rows)?;
        }
    }
    write_attention(&out.join("attention.csv"), &run.predictions)?;
    let ck = Checkpoint::new(run.params.clone(), None, 0, None, RngState { seed: cfg.seed, next_step: 0 }, cfg.clone());
    ck.save(&out.join("model"))?;
    let mut m = RunManifest::new(run.report.task, cfg, data);
    m.init = Some(run.report.init.clone());
    m.trainable_scalars = run.report.trainable_scalars;
    m.outputs = ["metrics.json", "predictions.csv", "attention.csv", "model"].map(String::from).to_vec();
    m.note("train_ids", &run.train_ids);
    m.note("head", &run.head);
    m.write(&out.join("run.json"))
}

/// Per-view multi-instance attention weights, one row per (study, view).
pub fn write_attention(path: &Path, preds: &[BagPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["study_id", "view", "weight"])?;
    for p in preds {
        for (v, a) in p.views.iter().zip(&p.weights) {
            w.write_record([p.study_id.clone(), v.to_string(), a.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One joint-space embedding per video.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub study_id: String,
    pub view: ViewTag,
    pub vector: Vec<f64>,
}

/// Embed every video of the dataset with all parameters frozen.
pub fn zero_shot_embed(params: &ParamSet, cfg: &RunConfig, data: &Dataset) -> Result<Vec<EmbeddingRow>> {
    let mut frozen = params.clone();
    freeze_plan(&mut frozen, FreezeMode::Frozen);
    let mut rows = Vec::new();
    for s in &data.studies {
        for v in &s.videos {
            let clip = temporal_subsample(&v.video, cfg.encoder.video.frames)?;
            let rep = encode_video(&frozen, &cfg.encoder, &clip)?;
            let e = project_tensor(&frozen, VIDEO_PROJ, &rep, Modality::Video)?;
            rows.push(EmbeddingRow {
                study_id: s.study_id.clone(),
                view: v.view,
                vector: e.vector.to_vec(),
            });
        }
    }
    Ok(rows)
}

pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = rows.first().map_or(0, |r| r.vector.len());
    let mut header = vec!["study_id".to_string(), "view".to_string()];
    header.extend((0..d).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.study_id.clone(), r.view.to_string()];
        rec.extend(r.vector.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |msg: String| Error::format(path, format!("line {}: {msg}", i + 2));
        let view: ViewTag = rec.get(1).unwrap_or_default().parse().map_err(|e: Error| bad(e.to_string()))?;
        let vector = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow {
            study_id: rec.get(0).unwrap_or_default().to_string(),
            view,
            vector,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_is_deterministic_and_sized() {
        let ids: Vec<String> = (0..250).map(|i| format!("s{i:03}")).collect();
        let a = subset_train(&ids, 0.01, 5).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, subset_train(&ids, 0.01, 5).unwrap());
        let mut rev = ids.clone();
        rev.reverse();
        assert_eq!(a, subset_train(&rev, 0.01, 5).unwrap());
        assert!(subset_train(&ids, 0.0, 5).is_err());
    }
}
