use cinetext::diffcore::{GradMap, OptimState, ParamSet};
use cinetext::encoders::{freeze_plan, FreezeMode};
use cinetext::evalstats::{auroc, ScoredSample};
use cinetext::milhead::pos_weight_from_labels;
use cinetext::synthdata::{generate_dataset, Dataset, Prevalence, RenderConfig, Split};
use cinetext::training::pretrain::list_checkpoints;
use cinetext::training::downstream::encoder_params;
use cinetext::training::{
    finetune_classification, finetune_regression, pretrain, subset_train, sweep_pretrain_quality,
    zero_shot_embed, Checkpoint, Init, RunConfig,
};
use cinetext::Error;

fn data(n: usize, seed: u64, prev: Prevalence, fractions: [f64; 3]) -> Dataset {
    generate_dataset(n, seed, prev, RenderConfig::default(), fractions).unwrap()
}

fn downstream_cfg(mode: FreezeMode, steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.finetune.freeze_mode = mode;
    cfg.finetune.steps = steps;
    cfg.finetune.eval_every = steps;
    cfg.finetune.bags_per_step = 4;
    cfg
}

fn bits(ps: &ParamSet, name: &str) -> Vec<u64> {
    ps.tensor(name).unwrap().bits()
}

#[test]
fn finetune_mode_leaves_frozen_weights_bit_identical() {
    let ds = data(16, 3, Prevalence::default(), [0.5, 0.25, 0.25]);
    let cfg = downstream_cfg(FreezeMode::Finetune, 6);
    let before = encoder_params(&Init::Random, &cfg).unwrap();
    let run = finetune_regression(&cfg, &ds, &Init::Random).unwrap();
    let mut changed = Vec::new();
    for (name, _) in before.iter() {
        let same = bits(&before, name) == bits(&run.params, name);
        if name.starts_with("video.proj.") {
            if !same {
                changed.push(name.clone());
            }
        } else {
            assert!(same, "{name} moved in finetune mode");
        }
    }
    assert!(!changed.is_empty());
    let d = cfg.encoder.joint_dim;
    let proj = d * cfg.encoder.final_width() + d;
    let head = cinetext::milhead::head_scalar_count(&run.head, d);
    assert_eq!(run.report.trainable_scalars, proj + head);
    assert_eq!(run.predictions.len(), ds.manifest.splits.get(Split::Test).len());
}

#[test]
fn frozen_mode_moves_nothing() {
    let cfg = RunConfig::default();
    let mut ps = cinetext::training::pretrain::initial_params(&cfg).unwrap();
    freeze_plan(&mut ps, FreezeMode::Frozen);
    let before: Vec<(String, Vec<u64>)> = ps.iter().map(|(n, p)| (n.clone(), p.value.bits())).collect();
    let grads: GradMap = ps.iter().map(|(n, p)| (n.clone(), p.value.map(|_| 1.0))).collect();
    let mut opt = OptimState::adamw(cfg.pretrain.optim.adam());
    for _ in 0..3 {
        opt.step(&mut ps, &grads, 1e-2).unwrap();
    }
    let after: Vec<(String, Vec<u64>)> = ps.iter().map(|(n, p)| (n.clone(), p.value.bits())).collect();
    assert_eq!(before, after);

    let ds = data(8, 4, Prevalence::default(), [0.5, 0.25, 0.25]);
    let err = finetune_regression(&downstream_cfg(FreezeMode::Frozen, 2), &ds, &Init::Random).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn transfer_mode_updates_the_trunk() {
    let ds = data(12, 5, Prevalence::default(), [0.5, 0.25, 0.25]);
    let cfg = downstream_cfg(FreezeMode::Transfer, 2);
    let before = encoder_params(&Init::Random, &cfg).unwrap();
    let run = finetune_regression(&cfg, &ds, &Init::Random).unwrap();
    assert_ne!(bits(&before, "video.patch.w"), bits(&run.params, "video.patch.w"));
    assert_eq!(run.report.trainable_scalars, run.params.trainable_scalar_count());
}

#[test]
fn data_fraction_subset_is_seeded_and_rounded_up() {
    let ids: Vec<String> = (0..150).map(|i| format!("s{i:03}")).collect();
    let a = subset_train(&ids, 0.01, 7).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(a, subset_train(&ids, 0.01, 7).unwrap());
    let mut shuffled = ids.clone();
    shuffled.reverse();
    assert_eq!(a, subset_train(&shuffled, 0.01, 7).unwrap());
    assert_eq!(subset_train(&ids, 0.1, 7).unwrap().len(), 15);
    assert_eq!(subset_train(&ids, 1.0, 7).unwrap().len(), 150);
    assert!(subset_train(&ids, 0.0, 7).is_err());
}

#[test]
fn pos_weight_counts_training_prevalence() {
    let labels: Vec<bool> = (0..40).map(|i| i % 5 == 0).collect();
    assert_eq!(pos_weight_from_labels(&labels, "x").unwrap(), 4.0);
    assert!(matches!(pos_weight_from_labels(&[false; 4], "x"), Err(Error::Config(_))));
}

/// Random-init embeddings are nearly collinear, so the head starts from a
/// briefly pretrained trunk.
#[test]
fn thickened_walls_are_separable() {
    let t = tempfile::tempdir().unwrap();
    let pre = data(128, 99, Prevalence::default(), [1.0, 0.0, 0.0]);
    let mut pc = RunConfig::default();
    pc.pretrain.epochs = 15;
    let trunk = pretrain(&pc, &pre, t.path(), None).unwrap().params;

    let prev = Prevalence::with_overrides(&[("hypertrophy".to_string(), 0.5)].into_iter().collect()).unwrap();
    let ds = data(64, 21, prev, [0.5, 0.25, 0.25]);
    let mut cfg = RunConfig::default();
    cfg.finetune.label = "hypertrophy".into();
    assert_eq!(cfg.finetune.epochs, 15);
    let init = Init::Pretrained {
        params: trunk,
        source: "short pretrain".into(),
    };
    let run = finetune_classification(&cfg, &ds, &init).unwrap();
    let cls = run.report.classification.as_ref().unwrap();
    let train_pos = run.train_ids.iter().filter(|id| ds.study(id).unwrap().phenotype.flag("hypertrophy")).count();
    let n = run.train_ids.len();
    assert_eq!(cls.pos_weight, (n - train_pos) as f64 / train_pos as f64);
    let s: Vec<ScoredSample> = run.predictions.iter().map(|p| ScoredSample::new(p.prediction, p.truth > 0.5)).collect();
    let auc = auroc(&s).unwrap().auc;
    assert!(auc >= 0.95, "test AUROC {auc}");
    assert_eq!(run.predictions.len(), ds.manifest.splits.get(Split::Test).len());
}

#[test]
fn zero_shot_embedding_is_deterministic() {
    let ds = data(4, 8, Prevalence::default(), [0.5, 0.25, 0.25]);
    let cfg = RunConfig::default();
    let ps = cinetext::training::pretrain::initial_params(&cfg).unwrap();
    let a = zero_shot_embed(&ps, &cfg, &ds).unwrap();
    let b = zero_shot_embed(&ps, &cfg, &ds).unwrap();
    assert_eq!(a.len(), ds.studies.iter().map(|s| s.videos.len()).sum::<usize>());
    assert_eq!(a, b);
    for r in &a {
        let norm: f64 = r.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

fn param_bits(ps: &ParamSet) -> Vec<(String, Vec<u64>)> {
    ps.iter().map(|(n, p)| (n.clone(), p.value.bits())).collect()
}

fn loss_bits(out: &cinetext::training::PretrainOutcome) -> Vec<(u64, u64)> {
    out.losses.iter().map(|r| (r.raw.to_bits(), r.flooded.to_bits())).collect()
}

#[test]
fn pretraining_floods_checkpoints_resumes_and_sweeps() {
    let pre = data(16, 11, Prevalence::default(), [1.0, 0.0, 0.0]);
    let mut cfg = RunConfig::default();
    cfg.pretrain.epochs = 4;
    cfg.pretrain.checkpoint_interval = 1;
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("full");
    let full = pretrain(&cfg, &pre, &out, None).unwrap();

    assert_eq!(full.losses.len(), 4 * 2);
    assert!(full.losses.iter().all(|r| r.flooded >= cfg.contrastive.flood_level));
    assert!(full.losses.iter().all(|r| r.flooded >= r.raw || r.raw >= cfg.contrastive.flood_level));
    assert_eq!(full.checkpoints.len(), 4 + 1);
    assert_eq!(list_checkpoints(&out).unwrap().len(), 4);

    let mut sparse = cfg.clone();
    sparse.pretrain.checkpoint_interval = 3;
    sparse.pretrain.epochs = 2;
    let few = pretrain(&sparse, &pre, &t.path().join("sparse"), None).unwrap();
    assert_eq!(few.checkpoints.len(), (2 / 3) + 1);

    let again = pretrain(&cfg, &pre, &t.path().join("again"), None).unwrap();
    assert_eq!(loss_bits(&again), loss_bits(&full));
    assert_eq!(param_bits(&again.params), param_bits(&full.params));

    let mid = Checkpoint::load(&out.join("checkpoints/epoch-0002")).unwrap();
    let resumed = pretrain(&cfg, &pre, &t.path().join("resumed"), Some(mid)).unwrap();
    assert_eq!(param_bits(&resumed.params), param_bits(&full.params));
    assert_eq!(loss_bits(&resumed)[..], loss_bits(&full)[4..]);

    let down = data(24, 12, Prevalence::default(), [0.5, 0.25, 0.25]);
    let ft = downstream_cfg(FreezeMode::Finetune, 4);
    let cks = list_checkpoints(&out).unwrap();
    let rows_a = sweep_pretrain_quality(&cks, &ft, &down).unwrap();
    let rows_b = sweep_pretrain_quality(&cks, &ft, &down).unwrap();
    assert_eq!(rows_a.len(), cks.len());
    let key = |r: &cinetext::training::SweepRow| (r.checkpoint.clone(), r.epoch, r.val_mae.to_bits(), r.val_mse.to_bits());
    assert_eq!(rows_a.iter().map(key).collect::<Vec<_>>(), rows_b.iter().map(key).collect::<Vec<_>>());
    assert!(sweep_pretrain_quality(&cks[..2], &ft, &down).is_err());
}
