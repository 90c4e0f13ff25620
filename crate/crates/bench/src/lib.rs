//! Fixtures shared by the criterion benches.

use cinetext::encoders::{init_model, EncoderConfig};
use cinetext::synthdata::{generate_study, Phenotype, RenderConfig, Study, ViewTag};
use cinetext::{ParamSet, Tensor};

pub fn desk_model() -> (EncoderConfig, ParamSet) {
    let cfg = EncoderConfig::desk();
    let ps = init_model(&cfg, 0).expect("desk config is valid");
    (cfg, ps)
}

pub fn study(seed: u64) -> Study {
    let p = Phenotype::new(0.55, 0.12, 1.0, 1.0).expect("valid phenotype");
    generate_study(&p, &ViewTag::standard(), seed, &RenderConfig::default()).expect("renders")
}

/// A `[1, frames, 32, 32]` clip from a rendered study.
pub fn clip(frames: usize) -> Tensor {
    cinetext::synthdata::temporal_subsample(&study(0).videos[0].video, frames).expect("subsample")
}
