use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, RunTask};
use crate::synthdata::Dataset;
use crate::Result;

/// What a run needs to be repeated: the effective config, seeds and inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: RunTask,
    pub version: String,
    pub seed: u64,
    pub dataset: String,
    pub dataset_seed: u64,
    pub dataset_n: usize,
    pub init: Option<String>,
    pub trainable_scalars: usize,
    pub outputs: Vec<String>,
    pub notes: BTreeMap<String, serde_json::Value>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(task: RunTask, cfg: &RunConfig, data: &Dataset) -> Self {
        RunManifest {
            task,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            dataset: data.root.display().to_string(),
            dataset_seed: data.manifest.seed,
            dataset_n: data.studies.len(),
            init: None,
            trainable_scalars: 0,
            outputs: Vec::new(),
            notes: BTreeMap::new(),
            config: cfg.clone(),
        }
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.notes.insert(key.to_string(), v);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::evalstats::io::write_json(path, self)
    }
}
