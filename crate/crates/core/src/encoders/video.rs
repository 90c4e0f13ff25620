use rand::Rng;

use super::config::EncoderConfig;
use super::nn::{self, AttnCapture, BlockSite, BlockSpec};
use crate::diffcore::{init, Binder, ParamSet, Tape, Tensor, Var};
use crate::{Error, Result};

/// Token sequence laid out on a spatiotemporal grid.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid<'t> {
    /// `[L, d]`; when `has_class_token`, row 0 is the class token.
    pub tokens: Var<'t>,
    pub grid: [usize; 3],
    pub has_class_token: bool,
}

impl TokenGrid<'_> {
    pub fn len(&self) -> usize {
        self.grid.iter().product::<usize>() + usize::from(self.has_class_token)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn init_params(cfg: &EncoderConfig, rng: &mut impl Rng, ps: &mut ParamSet) -> Result<()> {
    let v = &cfg.video;
    let d0 = v.stages[0].width;
    let patch_in = v.in_channels * v.cube.iter().product::<usize>();
    let tokens = cfg.embed_grid().iter().product::<usize>() + 1;
    nn::add_linear(ps, rng, "video.patch", d0, patch_in, true)?;
    ps.insert("video.cls", init::normal(rng, &[1, d0], 0.02))?;
    ps.insert("video.pos", init::normal(rng, &[tokens, d0], 0.02))?;
    for (si, spec) in block_specs(cfg).into_iter().enumerate() {
        for (li, b) in spec.into_iter().enumerate() {
            nn::add_block(ps, rng, &format!("video.s{si}.l{li}"), b)?;
        }
    }
    nn::add_layernorm(ps, "video.norm", cfg.final_width())?;
    nn::add_linear(ps, rng, "video.proj", cfg.joint_dim, cfg.final_width(), true)
}

/// Per-stage, per-layer block shapes.
pub(crate) fn block_specs(cfg: &EncoderConfig) -> Vec<Vec<BlockSpec>> {
    let mut d_prev = cfg.video.stages[0].width;
    cfg.video
        .stages
        .iter()
        .enumerate()
        .map(|(si, s)| {
            (0..s.layers)
                .map(|li| {
                    let first = li == 0;
                    let spec = BlockSpec {
                        d_in: if first { d_prev } else { s.width },
                        d_out: s.width,
                        heads: s.heads,
                        mlp_ratio: cfg.video.mlp_ratio,
                        q_stride: if first && si > 0 { s.stride } else { [1, 1, 1] },
                        kv_stride: s.stride,
                    };
                    if li + 1 == s.layers {
                        d_prev = s.width;
                    }
                    spec
                })
                .collect()
        })
        .collect()
}

/// Split a `[C,T,H,W]` clip into cubes and embed each with one learned linear map.
///
/// Returns the class token followed by one token per cube; positional
/// embeddings are added by [`video_forward`].
pub fn cube_embed<'t>(b: &Binder<'t, '_>, cfg: &EncoderConfig, video: &Tensor) -> Result<TokenGrid<'t>> {
    let v = &cfg.video;
    let s = video.shape();
    if s.len() != 4 || s[0] != v.in_channels {
        return Err(Error::contract(format!(
            "video must be [{}, T, H, W], got {s:?}",
            v.in_channels
        )));
    }
    let dims = [s[1], s[2], s[3]];
    for i in 0..3 {
        if dims[i] + 2 * v.padding[i] < v.cube[i] {
            return Err(Error::contract(format!(
                "video {dims:?} smaller than cube {:?}",
                v.cube
            )));
        }
    }
    let padded = std::array::from_fn(|i| dims[i] + 2 * v.padding[i]);
    let grid = crate::diffcore::ops::conv_grid(padded, v.cube, v.stride);
    let x = b.tape().constant(video.clone());
    let cols = x.im2col3d(v.cube, v.stride, v.padding);
    let tokens = nn::linear(b, "video.patch", cols);
    let seq = Var::concat_rows(&[b.p("video.cls"), tokens]);
    Ok(TokenGrid {
        tokens: seq,
        grid,
        has_class_token: true,
    })
}

/// One stage of pooled self-attention.
///
/// With `pool_queries`, the first layer pools queries (and the residual path)
/// by the stage stride, so the output grid is the input grid ceil-divided by
/// the stride. The class token is never pooled.
pub fn pooled_attention_stage<'t>(
    b: &Binder<'t, '_>,
    cfg: &EncoderConfig,
    stage: usize,
    tg: TokenGrid<'t>,
    pool_queries: bool,
    capture: Option<&AttnCapture>,
) -> Result<TokenGrid<'t>> {
    let s = cfg
        .video
        .stages
        .get(stage)
        .ok_or_else(|| Error::contract(format!("no stage {stage}")))?;
    if !tg.has_class_token {
        return Err(Error::contract("pooled attention expects a class token"));
    }
    let d_in = tg.tokens.shape()[1];
    let mut x = tg.tokens;
    let mut grid = tg.grid;
    for li in 0..s.layers {
        let first = li == 0;
        let spec = BlockSpec {
            d_in: if first { d_in } else { s.width },
            d_out: s.width,
            heads: s.heads,
            mlp_ratio: cfg.video.mlp_ratio,
            q_stride: if first && pool_queries { s.stride } else { [1, 1, 1] },
            kv_stride: s.stride,
        };
        let site = BlockSite {
            stage,
            layer: li,
            capture,
        };
        let (y, g) = nn::block(b, &format!("video.s{stage}.l{li}"), x, Some(grid), spec, site);
        x = y;
        grid = g.expect("grid");
    }
    Ok(TokenGrid {
        tokens: x,
        grid,
        has_class_token: true,
    })
}

/// Full video trunk: `[1, d_final]` class-token representation after the final norm.
pub fn video_forward<'t>(
    b: &Binder<'t, '_>,
    cfg: &EncoderConfig,
    video: &Tensor,
    capture: Option<&AttnCapture>,
) -> Result<Var<'t>> {
    let v = &cfg.video;
    let expect = [v.in_channels, v.frames, v.height, v.width];
    if video.shape() != expect {
        return Err(Error::contract(format!(
            "video shape {:?} does not match encoder input {expect:?}",
            video.shape()
        )));
    }
    let mut tg = cube_embed(b, cfg, video)?;
    tg.tokens = tg.tokens.add(b.p("video.pos"));
    for si in 0..v.stages.len() {
        tg = pooled_attention_stage(b, cfg, si, tg, si > 0, capture)?;
    }
    let cls = tg.tokens.slice_rows(0, 1);
    Ok(nn::layernorm(b, "video.norm", cls))
}

/// Inference-only trunk output as a `[d_final]` tensor.
pub fn encode_video(params: &ParamSet, cfg: &EncoderConfig, video: &Tensor) -> Result<Tensor> {
    let tape = Tape::inference();
    let b = Binder::new(&tape, params);
    let rep = video_forward(&b, cfg, video, None)?;
    let out = rep.value();
    if !out.is_finite() {
        return Err(Error::Numeric {
            op: "encode_video".into(),
            detail: "non-finite representation".into(),
        });
    }
    out.reshape(vec![out.len()])
}
