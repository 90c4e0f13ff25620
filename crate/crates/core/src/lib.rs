//! Contrastive video-text pretraining for cine imaging at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: tensors, reverse-mode differentiation, optimizers.
//! - [`encoders`]: multiscale video transformer, text transformer, projection heads.
//! - [`contrastive`]: bidirectional InfoNCE, flooding, batch construction.
//! - [`milhead`]: gated-attention multi-instance pooling and task heads.
//! - [`synthdata`]: synthetic cine studies, reports, tokenizer, augmentation.
//! - [`evalstats`]: ROC/DeLong, Bland-Altman, regression metrics, t-SNE.
//! - [`training`]: pretraining, finetuning, checkpoints and sweeps.
//! - [`heatmap`]: attention-map export.

pub mod contrastive;
pub mod diffcore;
pub mod encoders;
mod error;
pub mod evalstats;
pub mod heatmap;
pub mod milhead;
pub mod synthdata;
pub mod training;

pub use diffcore::{ParamSet, Tape, Tensor, Var};
pub use error::{Error, Result};
