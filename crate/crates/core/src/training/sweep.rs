//! Downstream quality as a function of pretraining progress.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::downstream::{finetune_regression, Init};
use crate::synthdata::Dataset;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub checkpoint: String,
    pub epoch: u64,
    pub pretrain_loss: Option<f64>,
    pub val_mae: f64,
    pub val_mse: f64,
}

/// Finetune a regression model from every checkpoint with the same finetune
/// settings and seed.
pub fn sweep_pretrain_quality(checkpoints: &[PathBuf], cfg: &RunConfig, data: &Dataset) -> Result<Vec<SweepRow>> {
    if checkpoints.len() < 3 {
        return Err(Error::Config(format!("a sweep needs at least 3 checkpoints, got {}", checkpoints.len())));
    }
    let mut rows = Vec::with_capacity(checkpoints.len());
    for dir in checkpoints {
        let ck = Checkpoint::load(dir)?;
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let (epoch, loss) = (ck.meta.epoch, ck.meta.pretrain_loss);
        let init = Init::Pretrained {
            params: ck.params,
            source: name.clone(),
        };
        let run = finetune_regression(cfg, data, &init)?;
        log::info!("sweep {name}: val MAE {:?}", run.report.val_mae);
        rows.push(SweepRow {
            checkpoint: name,
            epoch,
            pretrain_loss: loss,
            val_mae: run.report.val_mae.unwrap_or(f64::NAN),
            val_mse: run.report.val_mse.unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
