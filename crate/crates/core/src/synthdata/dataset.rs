//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/videos/<study>_<view>.cine   "CINE", u32 C, T, H, W, then f32 LE values
//! <dir>/reports/<study>.txt          one sentence per line
//! <dir>/splits/{train,val,test}.txt  one study id per line (copy of the manifest splits)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::phantom::{sample_population, Phenotype, Prevalence, RenderConfig, Study, StudyVideo, ViewTag};
use crate::diffcore::Tensor;
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const CINE_MAGIC: &[u8; 4] = b"CINE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Study-level train/validation/test partition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    /// Shuffle `ids` with `seed` and cut by `fractions` (train, val, test).
    /// Train and validation sizes are rounded; the test split takes the rest.
    pub fn from_fractions(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<Self> {
        let total: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
        }
        let mut order: Vec<String> = ids.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = order.len();
        let n_train = ((n as f64) * fractions[0]).round() as usize;
        let n_val = (((n as f64) * fractions[1]).round() as usize).min(n - n_train);
        let test = order.split_off(n_train + n_val);
        let val = order.split_off(n_train);
        Ok(SplitSpec { train: order, val, test })
    }

    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Pairwise disjoint, no duplicates, and every id present in `known`.
    pub fn validate(&self, known: &BTreeSet<&str>) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                if let Some(prev) = seen.insert(id.as_str(), name) {
                    return Err(Error::Config(format!("study `{id}` appears in both {prev} and {name}")));
                }
                if !known.contains(id.as_str()) {
                    return Err(Error::Config(format!("{name} split names unknown study `{id}`")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub study_id: String,
    pub seed: u64,
    pub phenotype: Phenotype,
    pub views: Vec<ViewTag>,
    pub report: String,
    pub videos: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n: usize,
    pub prevalence: Prevalence,
    pub render: RenderConfig,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
    pub splits: SplitSpec,
    pub studies: Vec<StudyEntry>,
}

impl DatasetManifest {
    pub fn new(
        studies: &[Study],
        seed: u64,
        prevalence: Prevalence,
        render: RenderConfig,
        split_fractions: [f64; 3],
        split_seed: u64,
    ) -> Result<Self> {
        let ids: Vec<String> = studies.iter().map(|s| s.study_id.clone()).collect();
        let splits = SplitSpec::from_fractions(&ids, split_fractions, split_seed)?;
        let entries = studies
            .iter()
            .map(|s| StudyEntry {
                study_id: s.study_id.clone(),
                seed: s.seed,
                phenotype: s.phenotype.clone(),
                views: s.videos.iter().map(|v| v.view).collect(),
                report: format!("reports/{}.txt", s.study_id),
                videos: s
                    .videos
                    .iter()
                    .map(|v| format!("videos/{}_{}.cine", s.study_id, v.view))
                    .collect(),
            })
            .collect();
        Ok(DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            seed,
            n: studies.len(),
            prevalence,
            render,
            split_fractions,
            split_seed,
            splits,
            studies: entries,
        })
    }
}

/// A loaded dataset with studies in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub studies: Vec<Study>,
    index: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn new(root: PathBuf, manifest: DatasetManifest, studies: Vec<Study>) -> Result<Self> {
        let index: BTreeMap<String, usize> =
            studies.iter().enumerate().map(|(i, s)| (s.study_id.clone(), i)).collect();
        if index.len() != studies.len() {
            return Err(Error::Config("duplicate study ids in dataset".into()));
        }
        let known: BTreeSet<&str> = index.keys().map(String::as_str).collect();
        manifest.splits.validate(&known)?;
        Ok(Dataset {
            root,
            manifest,
            studies,
            index,
        })
    }

    pub fn study(&self, id: &str) -> Result<&Study> {
        self.index
            .get(id)
            .map(|&i| &self.studies[i])
            .ok_or_else(|| Error::contract(format!("no study `{id}` in dataset")))
    }

    pub fn split(&self, split: Split) -> Result<Vec<&Study>> {
        self.manifest.splits.get(split).iter().map(|id| self.study(id)).collect()
    }
}

pub fn write_cine(path: &Path, video: &Tensor) -> Result<()> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!("cine files hold [C,T,H,W] tensors, got {s:?}")));
    }
    let mut buf = Vec::with_capacity(20 + 4 * video.len());
    buf.extend_from_slice(CINE_MAGIC);
    for &d in s {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in video.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_cine(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    if bytes.len() < 20 || &bytes[..4] != CINE_MAGIC {
        return Err(Error::format(path, "missing CINE header"));
    }
    let dims: Vec<usize> = (0..4)
        .map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != 20 + 4 * n {
        return Err(Error::format(path, format!("{} data bytes for dims {dims:?}", bytes.len() - 20)));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(dims, data).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Write `studies` under `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, studies: &[Study]) -> Result<()> {
    if manifest.studies.len() != studies.len() {
        return Err(Error::contract("manifest and study list differ in length"));
    }
    fs::create_dir_all(dir.join("videos"))?;
    fs::create_dir_all(dir.join("reports"))?;
    for (entry, study) in manifest.studies.iter().zip(studies) {
        if entry.study_id != study.study_id {
            return Err(Error::contract(format!(
                "manifest entry `{}` does not match study `{}`",
                entry.study_id, study.study_id
            )));
        }
        for (file, v) in entry.videos.iter().zip(&study.videos) {
            write_cine(&dir.join(file), &v.video)?;
        }
        let mut text = study.report.join("\n");
        text.push('\n');
        fs::write(dir.join(&entry.report), text)?;
    }
    fs::create_dir_all(dir.join("splits"))?;
    for (name, split) in [("train", Split::Train), ("val", Split::Val), ("test", Split::Test)] {
        let ids = manifest.splits.get(split);
        let mut text = ids.join("\n");
        if !ids.is_empty() {
            text.push('\n');
        }
        fs::write(dir.join("splits").join(format!("{name}.txt")), text)?;
    }
    write_json(&dir.join("manifest.json"), manifest)
}

/// Sample `n` studies and split them at the study level, in memory.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    prevalence: Prevalence,
    render: RenderConfig,
    split_fractions: [f64; 3],
) -> Result<Dataset> {
    let studies = sample_population(n, seed, &prevalence, &render)?;
    let manifest = DatasetManifest::new(&studies, seed, prevalence, render, split_fractions, seed)?;
    Dataset::new(PathBuf::new(), manifest, studies)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::Missing(mpath));
    }
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(&mpath)?).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &mpath,
            format!("unsupported dataset format_version {}", manifest.format_version),
        ));
    }
    let mut studies = Vec::with_capacity(manifest.studies.len());
    for e in &manifest.studies {
        if e.views.len() != e.videos.len() {
            return Err(Error::format(&mpath, format!("study `{}` lists mismatched views", e.study_id)));
        }
        let videos = e
            .views
            .iter()
            .zip(&e.videos)
            .map(|(&view, f)| Ok(StudyVideo { view, video: read_cine(&dir.join(f))? }))
            .collect::<Result<Vec<_>>>()?;
        let rpath = dir.join(&e.report);
        let text = fs::read_to_string(&rpath).map_err(|_| Error::Missing(rpath.clone()))?;
        studies.push(Study {
            study_id: e.study_id.clone(),
            seed: e.seed,
            videos,
            report: text.lines().map(str::to_string).collect(),
            phenotype: e.phenotype.clone(),
        });
    }
    Dataset::new(dir.to_path_buf(), manifest, studies)
}
