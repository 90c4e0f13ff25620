//! Video and text encoders and their projection heads into the joint space.
//!
//! # Parameter names
//!
//! Names are stable strings; checkpoints store them verbatim.
//!
//! | prefix | contents |
//! |---|---|
//! | `video.patch.{w,b}` | cube embedding, `w: [d0, C*kt*kh*kw]` |
//! | `video.cls`, `video.pos` | class token `[1,d0]`, positions `[1+L,d0]` |
//! | `video.s{S}.l{L}.*` | block `L` of stage `S` |
//! | `video.norm.{g,b}` | final layer norm |
//! | `video.proj.{w,b}` | video projection head (the encoder's last linear layer) |
//! | `text.tok`, `text.pos` | token and position embeddings |
//! | `text.l{L}.*` | text block `L` |
//! | `text.norm.{g,b}`, `text.proj.{w,b}` | final norm, text projection head |
//! | `head.*` | downstream multi-instance head (see [`crate::milhead`]) |
//!
//! Inside a block: `norm1`, `attn.{q,k,v,o}`, `skip` (only when the width
//! changes), `norm2`, `mlp.fc1`, `mlp.fc2`. Linear weights are `[out, in]`.

mod config;
pub mod nn;
pub mod text;
pub mod video;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{EncoderConfig, StageConfig, TextConfig, VideoConfig};
pub use nn::{AttnCapture, AttnRecord};
pub use text::{encode_text, text_forward};
pub use video::{cube_embed, encode_video, pooled_attention_stage, video_forward, TokenGrid};

use crate::diffcore::{Binder, ParamSet, Tape, Tensor, Var};
use crate::{Error, Result};

pub const VIDEO_PROJ: &str = "video.proj";
pub const TEXT_PROJ: &str = "text.proj";

/// Randomly initialized video encoder, text encoder and both projection heads.
pub fn init_model(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    video::init_params(cfg, &mut rng, &mut ps)?;
    text::init_params(cfg, &mut rng, &mut ps)?;
    Ok(ps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Text,
}

/// A unit-norm vector in the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding {
    pub vector: Tensor,
    pub source: Modality,
}

/// Linear projection `[n, d_in] -> [n, joint_dim]` followed by row-wise L2 normalization.
pub fn project<'t>(b: &Binder<'t, '_>, head: &str, rep: Var<'t>) -> Result<Var<'t>> {
    nn::linear(b, head, rep).l2_normalize_rows()
}

/// Project a single representation vector without recording gradients.
pub fn project_tensor(params: &ParamSet, head: &str, rep: &Tensor, source: Modality) -> Result<JointEmbedding> {
    let w = params.tensor(&format!("{head}.w"))?;
    if w.dims2().1 != rep.len() {
        return Err(Error::contract(format!(
            "representation of length {} does not fit head `{head}` with input {}",
            rep.len(),
            w.dims2().1
        )));
    }
    let tape = Tape::inference();
    let b = Binder::new(&tape, params);
    let x = tape.constant(rep.reshape(vec![1, rep.len()])?);
    let out = project(&b, head, x)?.value();
    Ok(JointEmbedding {
        vector: out.reshape(vec![out.len()])?,
        source,
    })
}

/// Which parameters a downstream run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeMode {
    /// Only the video projection head and the downstream head train.
    Finetune,
    /// Everything trains.
    Transfer,
    /// Nothing trains (zero-shot use).
    Frozen,
}

impl FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(FreezeMode::Finetune),
            "transfer" => Ok(FreezeMode::Transfer),
            "frozen" => Ok(FreezeMode::Frozen),
            other => Err(Error::contract(format!(
                "unknown freeze mode `{other}` (expected finetune, transfer or frozen)"
            ))),
        }
    }
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezeMode::Finetune => "finetune",
            FreezeMode::Transfer => "transfer",
            FreezeMode::Frozen => "frozen",
        })
    }
}

/// Assign trainable flags according to `mode`.
pub fn freeze_plan(params: &mut ParamSet, mode: FreezeMode) {
    match mode {
        FreezeMode::Transfer => params.set_all_trainable(true),
        FreezeMode::Frozen => params.set_all_trainable(false),
        FreezeMode::Finetune => {
            params.set_all_trainable(false);
            params.set_trainable_prefix(&format!("{VIDEO_PROJ}."), true);
            params.set_trainable_prefix("head.", true);
        }
    }
}

/// Freeze the lower text layers used during pretraining.
pub fn freeze_lower_text_layers(params: &mut ParamSet, cfg: &EncoderConfig) {
    for li in 0..cfg.text.frozen_layers {
        params.set_trainable_prefix(&format!("text.l{li}."), false);
    }
}
