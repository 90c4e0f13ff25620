//! Run orchestration: contrastive pretraining, downstream finetuning,
//! zero-shot embedding, checkpoints and sweeps.
//!
//! Every random choice is derived from the run seed and a step or epoch
//! counter, so a run is a pure function of its config and dataset, and a
//! resumed run matches an uninterrupted one bit for bit.

pub mod checkpoint;
mod config;
pub mod downstream;
mod manifest;
pub mod pretrain;
pub mod probe;
pub mod sweep;

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, CHECKPOINT_FORMAT_VERSION};
pub use config::{FinetuneConfig, OptimConfig, PretrainConfig, RunConfig, RunTask};
pub use downstream::{
    finetune_classification, finetune_regression, read_embeddings, subset_train, write_downstream, write_embeddings,
    zero_shot_embed, BagPrediction, DownstreamRun, EmbeddingRow, Init, MetricsReport,
};
pub use manifest::RunManifest;
pub use pretrain::{pretrain, LossRow, PretrainOutcome};
pub use probe::{logistic_probe, study_means, ProbeConfig};
pub use sweep::{sweep_pretrain_quality, write_sweep, SweepRow};
