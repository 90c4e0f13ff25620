use rand::Rng;

use super::config::EncoderConfig;
use super::nn::{self, BlockSite, BlockSpec};
use crate::diffcore::{init, Binder, ParamSet, Tape, Tensor, Var};
use crate::synthdata::vocab::{CLS_ID, PAD_ID};
use crate::{Error, Result};

pub(crate) fn init_params(cfg: &EncoderConfig, rng: &mut impl Rng, ps: &mut ParamSet) -> Result<()> {
    let t = &cfg.text;
    ps.insert("text.tok", init::normal(rng, &[t.vocab_size, t.hidden], 0.02))?;
    ps.insert("text.pos", init::normal(rng, &[t.max_tokens, t.hidden], 0.02))?;
    for li in 0..t.layers {
        nn::add_block(ps, rng, &format!("text.l{li}"), spec(cfg))?;
    }
    nn::add_layernorm(ps, "text.norm", t.hidden)?;
    nn::add_linear(ps, rng, "text.proj", cfg.joint_dim, t.hidden, true)
}

fn spec(cfg: &EncoderConfig) -> BlockSpec {
    BlockSpec {
        d_in: cfg.text.hidden,
        d_out: cfg.text.hidden,
        heads: cfg.text.heads,
        mlp_ratio: cfg.text.mlp_ratio,
        q_stride: [1, 1, 1],
        kv_stride: [1, 1, 1],
    }
}

/// Sequence actually fed to the transformer: padding removed, class id
/// guaranteed in front, truncated to `max_tokens`.
pub fn prepare_ids(cfg: &EncoderConfig, ids: &[usize]) -> Result<Vec<usize>> {
    let t = &cfg.text;
    if let Some(&bad) = ids.iter().find(|&&i| i >= t.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of {}",
            t.vocab_size
        )));
    }
    let mut seq: Vec<usize> = ids.iter().copied().filter(|&i| i != PAD_ID).collect();
    if seq.first() != Some(&CLS_ID) {
        seq.insert(0, CLS_ID);
    }
    seq.truncate(t.max_tokens);
    Ok(seq)
}

/// Bidirectional transformer over token ids; returns the `[1, hidden]`
/// class-position representation. Padding ids are dropped rather than
/// masked, which gives the same result for the remaining positions.
pub fn text_forward<'t>(b: &Binder<'t, '_>, cfg: &EncoderConfig, ids: &[usize]) -> Result<Var<'t>> {
    let seq = prepare_ids(cfg, ids)?;
    let n = seq.len();
    let tok = b.p("text.tok").embedding(&seq);
    let pos = b.p("text.pos").slice_rows(0, n);
    let mut x = tok.add(pos);
    for li in 0..cfg.text.layers {
        let site = BlockSite {
            stage: 0,
            layer: li,
            capture: None,
        };
        x = nn::block(b, &format!("text.l{li}"), x, None, spec(cfg), site).0;
    }
    Ok(nn::layernorm(b, "text.norm", x.slice_rows(0, 1)))
}

/// Inference-only text representation as a `[hidden]` tensor.
pub fn encode_text(params: &ParamSet, cfg: &EncoderConfig, ids: &[usize]) -> Result<Tensor> {
    let tape = Tape::inference();
    let b = Binder::new(&tape, params);
    let out = text_forward(&b, cfg, ids)?.value();
    out.reshape(vec![out.len()])
}
