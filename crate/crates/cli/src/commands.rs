use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cinetext::diffcore::{Binder, ParamSet, Tape, Tensor};
use cinetext::encoders::{encode_video, project_tensor, video_forward, AttnCapture, Modality, VIDEO_PROJ};
use cinetext::evalstats::io::{read_predictions, write_coords, write_curve, write_json, PredictionTable};
use cinetext::evalstats::{
    bland_altman, delong_ci, delong_compare, regression_metrics, tsne, ScoredSample, TsneConfig,
};
use cinetext::heatmap::export_maps;
use cinetext::milhead::{predict_bag, Bag, HeadConfig, Task};
use cinetext::synthdata::{
    generate_dataset, load_dataset, save_dataset, temporal_subsample, Dataset, Prevalence, RenderConfig, Split,
    ViewTag,
};
use cinetext::training::pretrain::{initial_params, list_checkpoints};
use cinetext::training::{
    finetune_classification, finetune_regression, pretrain as run_pretrain, read_embeddings, study_means,
    sweep_pretrain_quality, write_downstream, write_embeddings, write_sweep, zero_shot_embed, Checkpoint, Init,
    RunConfig, RunManifest, RunTask,
};
use cinetext::{Error, Result};
use serde::Serialize;

use crate::{AttnArgs, CheckArgs, ConfigArgs, EmbedArgs, EvalCommand, FinetuneArgs, GenArgs, PretrainArgs, SweepArgs};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Missing(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn load_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for s in &a.set {
        cfg.set(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    if !dir.exists() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    load_dataset(dir)
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.exists() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    Checkpoint::load(dir)
}

/// Take the architecture from a checkpoint when it differs from the run config.
fn adopt_encoder(cfg: &mut RunConfig, ck: &Checkpoint) {
    if cfg.encoder != ck.meta.config.encoder {
        log::info!("using the encoder configuration stored with the checkpoint");
        cfg.encoder = ck.meta.config.encoder.clone();
        cfg.batch.frames = cfg.encoder.video.frames;
    }
}

fn emit(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn parse_kv(s: &str) -> Result<(String, f64)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("`{s}` is not label=value")))?;
    let v = v
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("`{v}` in `{s}` is not a number")))?;
    Ok((k.trim().to_string(), v))
}

fn parse_split(s: &str) -> Result<[f64; 3]> {
    let parts = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Config(format!("split `{s}` is not A:B:C")))?;
    let arr: [f64; 3] = parts
        .try_into()
        .map_err(|_| Error::Config(format!("split `{s}` needs three fractions")))?;
    Ok(arr)
}

pub fn gen(a: GenArgs) -> Result<()> {
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() {
        if !a.force {
            return Err(Error::contract(format!(
                "{} exists and is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
        fs::remove_dir_all(&a.out)?;
    }
    let overrides = a.prevalence.iter().map(|s| parse_kv(s)).collect::<Result<BTreeMap<_, _>>>()?;
    let prevalence = Prevalence::with_overrides(&overrides)?;
    let render = RenderConfig {
        frames: a.frames,
        noise_sigma: a.noise,
        ..RenderConfig::default()
    };
    let data = generate_dataset(a.n, a.seed, prevalence, render, parse_split(&a.split)?)?;
    save_dataset(&a.out, &data.manifest, &data.studies)?;
    let s = &data.manifest.splits;
    eprintln!(
        "wrote {} studies to {} (train {}, val {}, test {})",
        a.n,
        a.out.display(),
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct CheckReport {
    studies: usize,
    videos: usize,
    train: usize,
    val: usize,
    test: usize,
    splits_disjoint: bool,
    prevalence: BTreeMap<String, f64>,
}

pub fn check(a: CheckArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    for (name, split) in [("train", Split::Train), ("val", Split::Val), ("test", Split::Test)] {
        let p = a.data.join("splits").join(format!("{name}.txt"));
        if p.exists() {
            let listed: Vec<String> = fs::read_to_string(&p)?.lines().map(str::to_string).collect();
            if listed.as_slice() != data.manifest.splits.get(split) {
                return Err(Error::format(&p, "split file disagrees with manifest.json"));
            }
        }
    }
    let mut prevalence = BTreeMap::new();
    for flag in cinetext::synthdata::phantom::FLAGS {
        let pos = data.studies.iter().filter(|s| s.phenotype.flag(flag)).count();
        prevalence.insert(flag.to_string(), pos as f64 / data.studies.len().max(1) as f64);
    }
    let s = &data.manifest.splits;
    emit(
        None,
        &CheckReport {
            studies: data.studies.len(),
            videos: data.studies.iter().map(|s| s.videos.len()).sum(),
            train: s.train.len(),
            val: s.val.len(),
            test: s.test.len(),
            splits_disjoint: true,
            prevalence,
        },
    )
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let data = load_data(&a.data)?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let out = run_pretrain(&cfg, &data, &a.out, resume)?;
    eprintln!("wrote {} checkpoints under {}", out.checkpoints.len(), a.out.join("checkpoints").display());
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(m) = &a.freeze_mode {
        cfg.finetune.freeze_mode = m.parse()?;
    }
    if let Some(f) = a.data_fraction {
        cfg.finetune.data_fraction = f;
    }
    if let Some(l) = &a.label {
        cfg.finetune.label = l.clone();
    }
    cfg.validate()?;
    let data = load_data(&a.data)?;
    let init = match &a.init {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            adopt_encoder(&mut cfg, &ck);
            Init::Pretrained {
                params: ck.params,
                source: dir.display().to_string(),
            }
        }
        None => Init::Random,
    };
    let run = match a.task.as_str() {
        "lvef_regression" => finetune_regression(&cfg, &data, &init)?,
        "disease_classification" => finetune_classification(&cfg, &data, &init)?,
        other => {
            return Err(Error::Config(format!(
                "unknown task `{other}` (expected lvef_regression or disease_classification)"
            )))
        }
    };
    write_downstream(&run, &cfg, &data, &a.out)?;
    eprintln!(
        "{} trainable scalars; metrics in {}",
        run.report.trainable_scalars,
        a.out.join("metrics.json").display()
    );
    Ok(())
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    let data = load_data(&a.data)?;
    let params = match &a.checkpoint {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            adopt_encoder(&mut cfg, &ck);
            ck.params
        }
        None => initial_params(&cfg)?,
    };
    let rows = zero_shot_embed(&params, &cfg, &data)?;
    fs::create_dir_all(&a.out)?;
    write_embeddings(&a.out.join("embeddings.csv"), &rows)?;
    let mut m = RunManifest::new(RunTask::ZeroShotEmbed, &cfg, &data);
    m.init = Some(a.checkpoint.as_ref().map_or("random".to_string(), |p| p.display().to_string()));
    m.outputs = vec!["embeddings.csv".into()];
    m.write(&a.out.join("run.json"))?;
    eprintln!("wrote {} embeddings", rows.len());
    Ok(())
}

fn scores(path: &Path) -> Result<Vec<(String, ScoredSample)>> {
    match read_predictions(path)? {
        PredictionTable::Scores(s) => Ok(s),
        PredictionTable::Pairs(_) => Err(Error::format(path, "expected study_id,score,label columns")),
    }
}

#[derive(Serialize)]
struct AgreementReport {
    metrics: cinetext::evalstats::RegressionMetrics,
    bland_altman: cinetext::evalstats::AgreementResult,
}

pub fn eval(what: EvalCommand) -> Result<()> {
    match what {
        EvalCommand::Roc { pred, out, curve } => {
            let s: Vec<ScoredSample> = scores(&pred)?.into_iter().map(|(_, s)| s).collect();
            let r = delong_ci(&s).or_else(|_| cinetext::evalstats::auroc(&s))?;
            if let Some(c) = curve {
                write_curve(&c, &r.curve)?;
            }
            emit(out.as_deref(), &r)
        }
        EvalCommand::Agreement { pred, out } => {
            let rows = match read_predictions(&pred)? {
                PredictionTable::Pairs(p) => p,
                PredictionTable::Scores(_) => return Err(Error::format(&pred, "expected study_id,pred,truth columns")),
            };
            let p: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let t: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let report = AgreementReport {
                metrics: regression_metrics(&p, &t)?,
                bland_altman: bland_altman(&p, &t)?,
            };
            emit(out.as_deref(), &report)
        }
        EvalCommand::Compare { a, b, out } => {
            let (sa, sb) = (scores(&a)?, scores(&b)?);
            let by_id: BTreeMap<&str, ScoredSample> = sb.iter().map(|(id, s)| (id.as_str(), *s)).collect();
            let mut xa = Vec::new();
            let mut xb = Vec::new();
            for (id, s) in &sa {
                let other = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::contract(format!("study `{id}` missing from {}", b.display())))?;
                xa.push(*s);
                xb.push(*other);
            }
            if sb.len() != sa.len() {
                return Err(Error::contract("score files cover different studies"));
            }
            emit(out.as_deref(), &delong_compare(&xa, &xb)?)
        }
        EvalCommand::Tsne {
            embeddings,
            out,
            per_study,
            seed,
            iters,
        } => {
            let rows = read_embeddings(&embeddings)?;
            let (ids, x): (Vec<String>, Vec<Vec<f64>>) = if per_study {
                study_means(&rows).into_iter().unzip()
            } else {
                rows.into_iter().map(|r| (format!("{}:{}", r.study_id, r.view), r.vector)).unzip()
            };
            let cfg = TsneConfig {
                iters,
                ..TsneConfig::for_points(x.len(), seed)
            };
            let r = tsne(&x, &cfg)?;
            write_coords(&out, &ids, &r.coords)?;
            eprintln!("t-SNE KL {:.4} -> {:.4}", r.initial_kl, r.final_kl);
            Ok(())
        }
    }
}

/// Head settings recovered from the parameter shapes of a downstream model.
fn head_from_params(ps: &ParamSet) -> Option<HeadConfig> {
    let w = ps.tensor("head.attn.w").ok()?;
    Some(HeadConfig {
        task: Task::Regression,
        layernorm_pre: ps.contains("head.norm.g"),
        pos_weight: 1.0,
        huber_delta: 1.0,
        hidden: w.len(),
    })
}

pub fn attn(a: AttnArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = ck.meta.config.clone();
    let data = load_data(&a.data)?;
    let study = data.study(&a.study).map_err(|_| Error::Missing(a.data.join(format!("<study {}>", a.study))))?;
    let filter: Option<ViewTag> = a.view.as_deref().map(str::parse).transpose()?;
    let videos: Vec<_> = study.videos.iter().filter(|v| filter.map_or(true, |f| f == v.view)).collect();
    if videos.is_empty() {
        return Err(Error::contract(format!("study `{}` has no view {:?}", a.study, a.view)));
    }
    fs::create_dir_all(&a.out)?;
    let frames = cfg.encoder.video.frames;
    let mut summary = BTreeMap::new();
    let mut embeds = Vec::new();
    for v in &videos {
        let clip = temporal_subsample(&v.video, frames)?;
        let capture = AttnCapture::new();
        {
            let tape = Tape::inference();
            let b = Binder::new(&tape, &ck.params);
            video_forward(&b, &cfg.encoder, &clip, Some(&capture))?;
        }
        let s = clip.shape();
        let dir = a.out.join(v.view.to_string());
        let maps = export_maps(&capture.into_records(), [s[1], s[2], s[3]], &dir)?;
        summary.insert(v.view.to_string(), maps.len());
        if ck.params.contains("head.attn.w") {
            let rep = encode_video(&ck.params, &cfg.encoder, &clip)?;
            embeds.push(project_tensor(&ck.params, VIDEO_PROJ, &rep, Modality::Video)?.vector);
        }
    }
    if let Some(head) = head_from_params(&ck.params) {
        let d = embeds[0].len();
        let flat: Vec<f64> = embeds.iter().flat_map(|e| e.data().iter().copied()).collect();
        let bag = Bag::new(Tensor::matrix(embeds.len(), d, flat)?, videos.iter().map(|v| v.view).collect())?;
        let (_, weights) = predict_bag(&ck.params, &bag, &head)?;
        let pred = cinetext::training::BagPrediction {
            study_id: study.study_id.clone(),
            prediction: f64::NAN,
            truth: f64::NAN,
            views: bag.views.clone(),
            weights,
        };
        cinetext::training::downstream::write_attention(&a.out.join("mil_attention.csv"), &[pred])?;
    }
    write_json(&a.out.join("maps.json"), &summary)?;
    eprintln!("wrote attention maps for {} views to {}", videos.len(), a.out.display());
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    cfg.finetune.data_fraction = a.data_fraction;
    cfg.validate()?;
    let data = load_data(&a.data)?;
    if !a.run.exists() {
        return Err(Error::Missing(a.run.clone()));
    }
    let cks: Vec<PathBuf> = list_checkpoints(&a.run)?;
    if let Some(first) = cks.first() {
        adopt_encoder(&mut cfg, &load_checkpoint(first)?);
    }
    let rows = sweep_pretrain_quality(&cks, &cfg, &data)?;
    write_sweep(&a.out, &rows)?;
    eprintln!("wrote {} sweep rows to {}", rows.len(), a.out.display());
    Ok(())
}
