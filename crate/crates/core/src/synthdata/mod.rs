//! Synthetic cine studies: phantom videos, template reports, labels,
//! tokenizer and the clip-level augmentation pipeline.
//!
//! Everything here is a pure function of its inputs and a seed. Per-study and
//! per-step generators are derived with [`derive_seed`], so work can be split
//! or resumed without changing results.

pub mod augment;
pub mod dataset;
pub mod phantom;
pub mod report;
pub mod vocab;

pub use augment::{apply_transform, augment_video, AugmentPolicy, SpatialTransform};
pub use dataset::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetManifest, Split, SplitSpec, StudyEntry};
pub use phantom::{
    area_oracle_ef, generate_study, render_view, sample_population, Phenotype, Prevalence, RenderConfig, Study,
    StudyVideo, ViewTag,
};
pub use vocab::Vocab;

use crate::diffcore::Tensor;
use crate::{Error, Result};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of stream `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

/// Frame indices `floor(i*T/target)`, wrapping cyclically when `T < target`.
pub fn subsample_indices(t: usize, target: usize) -> Vec<usize> {
    (0..target).map(|i| (i * t / target) % t).collect()
}

/// Uniform temporal subsampling of a `[C,T,H,W]` clip.
pub fn temporal_subsample(video: &Tensor, target_t: usize) -> Result<Tensor> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!("expected [C,T,H,W], got {s:?}")));
    }
    if target_t == 0 {
        return Err(Error::contract("target frame count must be at least 1"));
    }
    let (c, t, hw) = (s[0], s[1], s[2] * s[3]);
    if t == target_t {
        return Ok(video.clone());
    }
    let idx = subsample_indices(t, target_t);
    let src = video.data();
    let mut out = Vec::with_capacity(c * target_t * hw);
    for ch in 0..c {
        for &f in &idx {
            let o = (ch * t + f) * hw;
            out.extend_from_slice(&src[o..o + hw]);
        }
    }
    Tensor::new(vec![c, target_t, s[2], s[3]], out)
}
