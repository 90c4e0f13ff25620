//! Transformer building blocks shared by the video and text encoders.

use std::cell::RefCell;

use rand::Rng;

use crate::diffcore::{init, Binder, ParamSet, Tensor, Var};
use crate::Result;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Attention probabilities recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct AttnRecord {
    pub stage: usize,
    pub layer: usize,
    pub head: usize,
    /// Query grid (after query pooling).
    pub q_grid: [usize; 3],
    /// Key grid (after key/value pooling).
    pub kv_grid: [usize; 3],
    /// Row-stochastic `[Lq, Lk]` matrix; row/column 0 is the class token.
    pub probs: Tensor,
}

/// Collects [`AttnRecord`]s when passed to a forward pass.
#[derive(Default)]
pub struct AttnCapture {
    records: RefCell<Vec<AttnRecord>>,
}

impl AttnCapture {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&self, r: AttnRecord) {
        self.records.borrow_mut().push(r);
    }

    pub fn into_records(self) -> Vec<AttnRecord> {
        self.records.into_inner()
    }
}

pub(crate) fn add_linear(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, out_dim: usize, in_dim: usize, bias: bool) -> Result<()> {
    ps.insert(format!("{name}.w"), init::xavier(rng, out_dim, in_dim))?;
    if bias {
        ps.insert(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
    }
    Ok(())
}

pub(crate) fn add_layernorm(ps: &mut ParamSet, name: &str, dim: usize) -> Result<()> {
    ps.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0))?;
    ps.insert(format!("{name}.b"), Tensor::zeros(&[dim]))
}

pub(crate) fn linear<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>) -> Var<'t> {
    let w = b.p(&format!("{name}.w"));
    let bias = b.param(&format!("{name}.b")).ok();
    x.linear(w, bias)
}

pub(crate) fn layernorm<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>) -> Var<'t> {
    x.layernorm_rows(LN_EPS)
        .mul_row(b.p(&format!("{name}.g")))
        .add_row(b.p(&format!("{name}.b")))
}

/// Shape of one attention block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub q_stride: [usize; 3],
    pub kv_stride: [usize; 3],
}

pub(crate) fn add_block(ps: &mut ParamSet, rng: &mut impl Rng, p: &str, s: BlockSpec) -> Result<()> {
    add_layernorm(ps, &format!("{p}.norm1"), s.d_in)?;
    add_linear(ps, rng, &format!("{p}.attn.q"), s.d_out, s.d_in, true)?;
    add_linear(ps, rng, &format!("{p}.attn.k"), s.d_out, s.d_in, false)?;
    add_linear(ps, rng, &format!("{p}.attn.v"), s.d_out, s.d_in, true)?;
    add_linear(ps, rng, &format!("{p}.attn.o"), s.d_out, s.d_out, true)?;
    if s.d_in != s.d_out {
        add_linear(ps, rng, &format!("{p}.skip"), s.d_out, s.d_in, false)?;
    }
    add_layernorm(ps, &format!("{p}.norm2"), s.d_out)?;
    let hidden = s.d_out * s.mlp_ratio;
    add_linear(ps, rng, &format!("{p}.mlp.fc1"), hidden, s.d_out, true)?;
    add_linear(ps, rng, &format!("{p}.mlp.fc2"), s.d_out, hidden, true)
}

/// Where a block sits, for attention capture.
#[derive(Clone, Copy)]
pub(crate) struct BlockSite<'c> {
    pub stage: usize,
    pub layer: usize,
    pub capture: Option<&'c AttnCapture>,
}

/// Pre-norm transformer block with pooled attention.
///
/// `x` is `[1 + L, d_in]` with a class token in row 0 and the rest laid out
/// on `grid` (pass `None` for an unstructured sequence such as text). Keys and
/// values are average-pooled by `kv_stride`, queries and the residual path by
/// `q_stride`. Pooling is applied before the projections; averaging commutes
/// with affine maps, so this equals pooling the projected sequences.
pub(crate) fn block<'t>(
    b: &Binder<'t, '_>,
    p: &str,
    x: Var<'t>,
    grid: Option<[usize; 3]>,
    s: BlockSpec,
    site: BlockSite<'_>,
) -> (Var<'t>, Option<[usize; 3]>) {
    let pool = |v: Var<'t>, stride: [usize; 3]| match grid {
        Some(g) => v.pool_grid(g, stride, true),
        None => v,
    };
    let q_grid = grid.map(|g| crate::diffcore::ops::pooled_grid(g, s.q_stride));
    let kv_grid = grid.map(|g| crate::diffcore::ops::pooled_grid(g, s.kv_stride));

    let xn = layernorm(b, &format!("{p}.norm1"), x);
    let q = linear(b, &format!("{p}.attn.q"), pool(xn, s.q_stride));
    let kv_in = pool(xn, s.kv_stride);
    let k = linear(b, &format!("{p}.attn.k"), kv_in);
    let v = linear(b, &format!("{p}.attn.v"), kv_in);

    let dh = s.d_out / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(s.heads);
    for h in 0..s.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if s.heads == 1 {
            (q, k, v)
        } else {
            (q.slice_cols(lo, hi), k.slice_cols(lo, hi), v.slice_cols(lo, hi))
        };
        let probs = qh.matmul_nt(kh).scale(scale).softmax_rows();
        if let Some(cap) = site.capture {
            cap.push(AttnRecord {
                stage: site.stage,
                layer: site.layer,
                head: h,
                q_grid: q_grid.unwrap_or([0; 3]),
                kv_grid: kv_grid.unwrap_or([0; 3]),
                probs: probs.value(),
            });
        }
        outs.push(probs.matmul(vh));
    }
    let attn = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs) };
    let attn = linear(b, &format!("{p}.attn.o"), attn);

    let mut residual = pool(x, s.q_stride);
    if s.d_in != s.d_out {
        residual = linear(b, &format!("{p}.skip"), residual);
    }
    let x = residual.add(attn);
    let hmid = linear(b, &format!("{p}.mlp.fc1"), layernorm(b, &format!("{p}.norm2"), x)).gelu();
    let x = x.add(linear(b, &format!("{p}.mlp.fc2"), hmid));
    (x, q_grid)
}
