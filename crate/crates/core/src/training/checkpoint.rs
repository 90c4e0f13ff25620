//! Checkpoint directories: `manifest.json` plus `params.bin`.
//!
//! `params.bin` is `"CKPT"`, a `u32` format version, then one record per
//! array until end of file: `u32` name length, UTF-8 name, `u32` rank, `u32`
//! dims, `f32` values, all little-endian. Optimizer moments are stored as
//! extra arrays named `@m/<param>` and `@v/<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::diffcore::{AdamConfig, DecayMode, OptimState, ParamSet, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CKPT";
const M_PREFIX: &str = "@m/";
const V_PREFIX: &str = "@v/";

/// Everything random in a run is derived from the base seed and the step
/// counter, so these two numbers are the generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimMeta {
    pub config: AdamConfig,
    pub mode: DecayMode,
    pub step: u64,
    pub f32_storage: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Completed epochs.
    pub epoch: u64,
    pub pretrain_loss: Option<f64>,
    pub rng: RngState,
    pub frozen: Vec<String>,
    pub optimizer: Option<OptimMeta>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub optimizer: Option<OptimState>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(params: ParamSet, optimizer: Option<OptimState>, epoch: u64, loss: Option<f64>, rng: RngState, config: RunConfig) -> Self {
        let frozen = params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        let optim_meta = optimizer.as_ref().map(|o| OptimMeta {
            config: o.config,
            mode: o.mode,
            step: o.step,
            f32_storage: o.f32_storage,
        });
        Checkpoint {
            params,
            optimizer,
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                epoch,
                pretrain_loss: loss,
                rng,
                frozen,
                optimizer: optim_meta,
                config,
            },
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        for (name, p) in self.params.iter() {
            write_entry(&mut buf, name, &p.value);
        }
        if let Some(o) = &self.optimizer {
            for (name, t) in &o.m {
                write_entry(&mut buf, &format!("{M_PREFIX}{name}"), t);
            }
            for (name, t) in &o.v {
                write_entry(&mut buf, &format!("{V_PREFIX}{name}"), t);
            }
        }
        fs::write(dir.join("params.bin"), buf)?;
        let mut f = fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, &self.meta)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let ppath = dir.join("params.bin");
        for p in [&mpath, &ppath] {
            if !p.exists() {
                return Err(Error::Missing(p.clone()));
            }
        }
        let meta: CheckpointMeta =
            serde_json::from_str(&fs::read_to_string(&mpath)?).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(&mpath, format!("unknown format_version {}", meta.format_version)));
        }
        let entries = read_entries(&ppath)?;
        let mut params = ParamSet::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for (name, t) in entries {
            if let Some(n) = name.strip_prefix(M_PREFIX) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(V_PREFIX) {
                v.insert(n.to_string(), t);
            } else {
                params.insert(name, t)?;
            }
        }
        for name in &meta.frozen {
            params
                .set_trainable(name, false)
                .map_err(|_| Error::format(&mpath, format!("frozen parameter `{name}` not in params.bin")))?;
        }
        let optimizer = meta.optimizer.as_ref().map(|o| OptimState {
            config: o.config,
            mode: o.mode,
            step: o.step,
            m,
            v,
            f32_storage: o.f32_storage,
        });
        Ok(Checkpoint { params, optimizer, meta })
    }
}

fn write_entry(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn read_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing CKPT header"));
    }
    let mut pos = 4;
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated record"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let version = u32_at(&mut pos)?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(path, format!("unknown format_version {version}")));
    }
    let mut out = Vec::new();
    while pos < bytes.len() {
        let len = u32_at(&mut pos)? as usize;
        let name = bytes
            .get(pos..pos + len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| bad("bad parameter name"))?
            .to_string();
        pos += len;
        let rank = u32_at(&mut pos)? as usize;
        let dims = (0..rank).map(|_| u32_at(&mut pos).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated values"))?;
        pos += 4 * n;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::format(path, format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::vector(vec![1.5, -2.0])).unwrap();
        let rng = RngState { seed: 1, next_step: 0 };
        Checkpoint::new(ps, None, 0, None, rng, RunConfig::default()).save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(loaded.params.tensor("a").unwrap().data(), &[1.5, -2.0]);
        let mut bytes = fs::read(dir.path().join("params.bin")).unwrap();
        bytes[4] = 9;
        fs::write(dir.path().join("params.bin"), bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format { .. })));
    }
}
