//! Contrastive pretraining loop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::{RunConfig, RunTask};
use super::manifest::RunManifest;
use crate::contrastive::{build_pretrain_batch, combined_loss, flood};
use crate::diffcore::{forward_backward, Binder, OptimState, ParamSet, Tape, Var};
use crate::encoders::{freeze_lower_text_layers, init_model, project, text_forward, video_forward, TEXT_PROJ, VIDEO_PROJ};
use crate::synthdata::{derive_seed, Dataset, Split, Study, Vocab};
use crate::{Error, Result};

const SHUFFLE_STREAM: u64 = 10;
const STEP_STREAM: u64 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: u64,
    pub step: u64,
    pub raw: f64,
    pub flooded: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: ParamSet,
    /// Checkpoint directories written by this call, in order.
    pub checkpoints: Vec<PathBuf>,
    /// Full loss log, including rows kept from before a resume.
    pub losses: Vec<LossRow>,
}

/// Fresh encoder parameters at storage precision with the lower text layers frozen.
pub fn initial_params(cfg: &RunConfig) -> Result<ParamSet> {
    let mut ps = init_model(&cfg.encoder, cfg.seed)?;
    ps.round_to_f32();
    freeze_lower_text_layers(&mut ps, &cfg.encoder);
    Ok(ps)
}

/// Directory name of the checkpoint saved after `epoch` completed epochs.
pub fn checkpoint_dir(out: &Path, epoch: u64) -> PathBuf {
    out.join("checkpoints").join(format!("epoch-{epoch:04}"))
}

pub fn final_checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints").join("final")
}

/// One optimizer step on a batch of studies. Returns `(raw, flooded)` loss.
pub fn pretrain_step(
    params: &mut ParamSet,
    optim: &mut OptimState,
    cfg: &RunConfig,
    vocab: &Vocab,
    studies: &[&Study],
    step_seed: u64,
    lr: f64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let batch = build_pretrain_batch(studies, &mut rng, &cfg.batch, vocab)?;
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    let mut vreps = Vec::with_capacity(batch.videos.len());
    for v in &batch.videos {
        vreps.push(video_forward(&b, &cfg.encoder, v, None)?);
    }
    let mut treps = Vec::with_capacity(batch.tokens.len());
    for t in &batch.tokens {
        treps.push(text_forward(&b, &cfg.encoder, t)?);
    }
    let v = project(&b, VIDEO_PROJ, Var::concat_rows(&vreps))?;
    let u = project(&b, TEXT_PROJ, Var::concat_rows(&treps))?;
    let raw = combined_loss(v, u, &cfg.contrastive)?;
    let flooded = flood(raw, cfg.contrastive.flood_level);
    let (raw_v, flooded_v) = (raw.item(), flooded.item());
    if !raw_v.is_finite() {
        return Err(Error::Numeric {
            op: "pretrain".into(),
            detail: format!("non-finite loss {raw_v} at step {}", optim.step),
        });
    }
    let grads = forward_backward(flooded, &b)?;
    drop(b);
    optim.step(params, &grads, lr)?;
    Ok((raw_v, flooded_v))
}

fn read_loss_log(path: &Path, before_epoch: u64) -> Result<Vec<LossRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for r in csv::Reader::from_path(path)?.deserialize() {
        let r: LossRow = r?;
        if r.epoch < before_epoch {
            rows.push(r);
        }
    }
    Ok(rows)
}

fn write_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Train both encoders on the dataset's training split.
///
/// Writes `loss.csv`, `run.json` and checkpoints under `out`. With `resume`,
/// training continues from the checkpoint's epoch and step and reproduces the
/// uninterrupted run bitwise.
pub fn pretrain(cfg: &RunConfig, data: &Dataset, out: &Path, resume: Option<Checkpoint>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let train = data.split(Split::Train)?;
    if train.len() < cfg.batch.batch_size {
        return Err(Error::Config(format!(
            "{} training studies cannot fill a batch of {}",
            train.len(),
            cfg.batch.batch_size
        )));
    }
    let vocab = Vocab::report_grammar();
    if vocab.len() > cfg.encoder.text.vocab_size {
        return Err(Error::Config(format!(
            "report vocabulary of {} exceeds text vocab_size {}",
            vocab.len(),
            cfg.encoder.text.vocab_size
        )));
    }
    fs::create_dir_all(out)?;
    let loss_path = out.join("loss.csv");

    let (mut params, mut optim, start_epoch, mut step) = match resume {
        Some(ck) => {
            let c = &ck.meta.config;
            if c.encoder != cfg.encoder || c.seed != cfg.seed || c.batch.batch_size != cfg.batch.batch_size {
                return Err(Error::Config(
                    "resume checkpoint was written with a different encoder, seed or batch size".into(),
                ));
            }
            let optim = ck
                .optimizer
                .ok_or_else(|| Error::Config("resume checkpoint carries no optimizer state".into()))?;
            (ck.params, optim, ck.meta.epoch, ck.meta.rng.next_step)
        }
        None => {
            let optim = OptimState::adamw(cfg.pretrain.optim.adam()).f32_storage(true);
            (initial_params(cfg)?, optim, 0, 0)
        }
    };
    let mut losses = if start_epoch > 0 { read_loss_log(&loss_path, start_epoch)? } else { Vec::new() };
    let schedule = cfg.pretrain.optim.schedule();
    let n = cfg.batch.batch_size;
    let mut checkpoints = Vec::new();
    let mut manifest = RunManifest::new(RunTask::Pretrain, cfg, data);
    manifest.trainable_scalars = params.trainable_scalar_count();
    manifest.note("resumed_from_epoch", start_epoch);
    let rng_state = |step| RngState {
        seed: cfg.seed,
        next_step: step,
    };

    for epoch in start_epoch..cfg.pretrain.epochs {
        let lr = schedule.lr_at(epoch);
        let mut order: Vec<&Study> = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM, epoch)));
        let mut epoch_raw = Vec::new();
        for chunk in order.chunks_exact(n) {
            let r = pretrain_step(&mut params, &mut optim, cfg, &vocab, chunk, derive_seed(cfg.seed, STEP_STREAM, step), lr);
            let (raw, flooded) = match r {
                Ok(v) => v,
                Err(e) => {
                    write_loss_log(&loss_path, &losses)?;
                    manifest.note("aborted", e.to_string());
                    manifest.outputs = checkpoints.iter().map(|p: &PathBuf| p.display().to_string()).collect();
                    manifest.write(&out.join("run.json"))?;
                    return Err(e);
                }
            };
            losses.push(LossRow {
                epoch,
                step,
                raw,
                flooded,
            });
            epoch_raw.push(raw);
            step += 1;
        }
        let mean_raw = epoch_raw.iter().sum::<f64>() / epoch_raw.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean_raw:.4} lr {lr:e}");
        write_loss_log(&loss_path, &losses)?;
        let done = epoch + 1;
        let periodic = done % cfg.pretrain.checkpoint_interval == 0;
        let last = done == cfg.pretrain.epochs;
        if periodic || last {
            let ck = Checkpoint::new(params.clone(), Some(optim.clone()), done, Some(mean_raw), rng_state(step), cfg.clone());
            if periodic {
                let dir = checkpoint_dir(out, done);
                ck.save(&dir)?;
                checkpoints.push(dir);
            }
            if last {
                let dir = final_checkpoint_dir(out);
                ck.save(&dir)?;
                checkpoints.push(dir);
            }
        }
    }
    manifest.outputs = checkpoints.iter().map(|p| p.display().to_string()).collect();
    manifest.write(&out.join("run.json"))?;
    Ok(PretrainOutcome {
        params,
        checkpoints,
        losses,
    })
}

/// Periodic checkpoints under `out`, ordered by epoch (the `final` copy excluded).
pub fn list_checkpoints(out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join("checkpoints");
    if !dir.exists() {
        return Err(Error::Missing(dir));
    }
    let mut found: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("epoch-")))
        .collect();
    found.sort();
    Ok(found)
}
