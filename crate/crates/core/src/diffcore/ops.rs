//! Differentiable primitives.
//!
//! Shape errors inside primitives are programming errors and panic with a
//! `contract violation` message. Public entry points validate user input and
//! return [`crate::Error`] before reaching here.

use super::tape::Var;
use super::Tensor;
use crate::{Error, Result};

/// `sqrt(2/pi)`, the tanh-approximation GELU constant.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-approximation GELU.
pub const GELU_A: f64 = 0.044_715;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        assert!($cond, "contract violation: {}", format!($($arg)+))
    };
}

/// Row-major GEMM: `C[m,n] = op(A) op(B)` where `op` optionally transposes.
///
/// `a` is stored as `[m,k]` (or `[k,m]` when `ta`), `b` as `[k,n]` (or `[n,k]` when `tb`).
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    // SAFETY: slice lengths match the dimensions and strides given above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    fn unary(self, op: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + Send + 'static) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let (xs, ys) = (x.clone(), y.clone());
        self.tape.push(op, y, &[self], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(xs.data())
                    .zip(ys.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect(),
            )]
        })
    }

    fn assert_same_shape(&self, other: &Var<'_>, op: &str) {
        let (a, b) = (self.shape(), other.shape());
        contract!(a == b, "{op}: shape {a:?} vs {b:?}");
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.assert_same_shape(&other, "add");
        let (a, b) = (self.value(), other.value());
        let y = Tensor::from_parts(a.shape().to_vec(), zip_map(a.data(), b.data(), |x, y| x + y));
        self.tape.push("add", y, &[self, other], |g, _| vec![Some(g.to_vec()), Some(g.to_vec())])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.assert_same_shape(&other, "sub");
        let (a, b) = (self.value(), other.value());
        let y = Tensor::from_parts(a.shape().to_vec(), zip_map(a.data(), b.data(), |x, y| x - y));
        self.tape.push("sub", y, &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.assert_same_shape(&other, "mul");
        let (a, b) = (self.value(), other.value());
        let y = Tensor::from_parts(a.shape().to_vec(), zip_map(a.data(), b.data(), |x, y| x * y));
        self.tape.push("mul", y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| zip_map(g, b.data(), |g, b| g * b)),
                need[1].then(|| zip_map(g, a.data(), |g, a| g * a)),
            ]
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let y = self.value().map(|x| x * c);
        self.tape.push("scale", y, &[self], move |g, _| vec![Some(g.iter().map(|v| v * c).collect())])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let y = self.value().map(|x| x + c);
        self.tape.push("add_scalar", y, &[self], |g, _| vec![Some(g.to_vec())])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Broadcast-add a `[n]` vector to every row of a `[m,n]` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let b = bias.value();
        let (m, n) = x.dims2();
        contract!(b.len() == n, "add_row: bias {:?} vs input {:?}", b.shape(), x.shape());
        let mut y = x.to_vec();
        for row in y.chunks_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        self.tape.push("add_row", y, &[self, bias], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; n];
                for r in 0..m {
                    acc.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![need[0].then(|| g.to_vec()), gb]
        })
    }

    /// Broadcast-multiply every row of a `[m,n]` matrix by a `[n]` vector.
    pub fn mul_row(self, scale: Var<'t>) -> Var<'t> {
        let x = self.value();
        let s = scale.value();
        let (m, n) = x.dims2();
        contract!(s.len() == n, "mul_row: scale {:?} vs input {:?}", s.shape(), x.shape());
        let mut y = x.to_vec();
        for row in y.chunks_mut(n) {
            row.iter_mut().zip(s.data()).for_each(|(v, ss)| *v *= ss);
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        self.tape.push("mul_row", y, &[self, scale], move |g, need| {
            let gx = need[0].then(|| {
                let mut out = g.to_vec();
                for row in out.chunks_mut(n) {
                    row.iter_mut().zip(s.data()).for_each(|(v, ss)| *v *= ss);
                }
                out
            });
            let gs = need[1].then(|| {
                let mut acc = vec![0.0; n];
                let xd = x.data();
                for r in 0..m {
                    for j in 0..n {
                        acc[j] += g[r * n + j] * xd[r * n + j];
                    }
                }
                acc
            });
            vec![gx, gs]
        })
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        contract!(k == k2, "matmul: {:?} x {:?}", a.shape(), b.shape());
        let y = Tensor::from_parts(vec![m, n], gemm(m, k, n, a.data(), false, b.data(), false));
        self.tape.push("matmul", y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| gemm(m, n, k, g, false, b.data(), true)),
                need[1].then(|| gemm(k, m, n, a.data(), true, g, false)),
            ]
        })
    }

    /// `[m,k] x [n,k]^T -> [m,n]`; the layout of linear-layer weights.
    pub fn matmul_nt(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2();
        let (n, k2) = b.dims2();
        contract!(k == k2, "matmul_nt: {:?} x {:?}^T", a.shape(), b.shape());
        let y = Tensor::from_parts(vec![m, n], gemm(m, k, n, a.data(), false, b.data(), true));
        self.tape.push("matmul_nt", y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| gemm(m, n, k, g, false, b.data(), false)),
                need[1].then(|| gemm(n, m, k, g, true, a.data(), false)),
            ]
        })
    }

    pub fn transpose(self) -> Var<'t> {
        let x = self.value();
        contract!(x.rank() == 2, "transpose needs rank 2, got {:?}", x.shape());
        let (m, n) = x.dims2();
        let t = |d: &[f64], rows: usize, cols: usize| {
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = d[i * cols + j];
                }
            }
            out
        };
        let y = Tensor::from_parts(vec![n, m], t(x.data(), m, n));
        self.tape.push("transpose", y, &[self], move |g, _| vec![Some(t(g, n, m))])
    }

    /// Linear layer: `x W^T + b` with `W: [out, in]`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Var<'t> {
        let y = self.matmul_nt(w);
        match b {
            Some(b) => y.add_row(b),
            None => y,
        }
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary("gelu", gelu, |x, _| gelu_grad(x))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    /// Absolute value. The subgradient at zero is fixed to `+1`.
    pub fn abs(self) -> Var<'t> {
        self.unary("abs", f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let n = x.len();
        let y = Tensor::scalar(x.data().iter().sum());
        self.tape.push("sum", y, &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Softmax along the last axis of a `[m,n]` matrix (or a vector).
    pub fn softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let (_, n) = x.dims2();
        let mut y = x.to_vec();
        for row in y.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let ys = y.clone();
        self.tape.push("softmax", y, &[self], move |g, _| {
            let mut out = vec![0.0; g.len()];
            for ((o, gr), yr) in out.chunks_mut(n).zip(g.chunks(n)).zip(ys.data().chunks(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    o[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(out)]
        })
    }

    /// Log-softmax along the last axis, stabilized by the row maximum.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let (_, n) = x.dims2();
        let mut y = x.to_vec();
        for row in y.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let ys = y.clone();
        self.tape.push("log_softmax", y, &[self], move |g, _| {
            let mut out = vec![0.0; g.len()];
            for ((o, gr), yr) in out.chunks_mut(n).zip(g.chunks(n)).zip(ys.data().chunks(n)) {
                let gs: f64 = gr.iter().sum();
                for j in 0..n {
                    o[j] = gr[j] - yr[j].exp() * gs;
                }
            }
            vec![Some(out)]
        })
    }

    /// Normalize each row to zero mean and unit (biased) variance. No affine part.
    pub fn layernorm_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let (m, n) = x.dims2();
        let mut y = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &x.data()[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                y[r * n + j] = (row[j] - mu) * is;
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let ys = y.clone();
        self.tape.push("layernorm", y, &[self], move |g, _| {
            let mut out = vec![0.0; m * n];
            let yd = ys.data();
            for r in 0..m {
                let gr = &g[r * n..(r + 1) * n];
                let yr = &yd[r * n..(r + 1) * n];
                let gm = gr.iter().sum::<f64>() / n as f64;
                let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    out[r * n + j] = inv_std[r] * (gr[j] - gm - yr[j] * gym);
                }
            }
            vec![Some(out)]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let y = x
            .reshape(shape.to_vec())
            .unwrap_or_else(|e| panic!("{e}"));
        self.tape.push("reshape", y, &[self], |g, _| vec![Some(g.to_vec())])
    }

    /// Stack `[m_i, n]` matrices vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        contract!(!parts.is_empty(), "concat_rows of nothing");
        let tape = parts[0].tape;
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let n = vals[0].dims2().1;
        contract!(
            vals.iter().all(|v| v.dims2().1 == n),
            "concat_rows: column mismatch"
        );
        let rows: Vec<usize> = vals.iter().map(|v| v.dims2().0).collect();
        let data: Vec<f64> = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
        let total: usize = rows.iter().sum();
        let y = Tensor::from_parts(vec![total, n], data);
        tape.push("concat_rows", y, parts, move |g, need| {
            let mut off = 0;
            rows.iter()
                .zip(need)
                .map(|(&r, &nd)| {
                    let s = &g[off * n..(off + r) * n];
                    off += r;
                    nd.then(|| s.to_vec())
                })
                .collect()
        })
    }

    /// Rows `start..end` of a `[m,n]` matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let (m, n) = x.dims2();
        contract!(start < end && end <= m, "slice_rows {start}..{end} of {m}");
        let y = Tensor::from_parts(vec![end - start, n], x.data()[start * n..end * n].to_vec());
        self.tape.push("slice_rows", y, &[self], move |g, _| {
            let mut out = vec![0.0; m * n];
            out[start * n..end * n].copy_from_slice(g);
            vec![Some(out)]
        })
    }

    /// Join `[m, n_i]` matrices side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        contract!(!parts.is_empty(), "concat_cols of nothing");
        let tape = parts[0].tape;
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let m = vals[0].dims2().0;
        contract!(
            vals.iter().all(|v| v.dims2().0 == m),
            "concat_cols: row mismatch"
        );
        let widths: Vec<usize> = vals.iter().map(|v| v.dims2().1).collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (v, &w) in vals.iter().zip(&widths) {
            for r in 0..m {
                data[r * n + off..r * n + off + w].copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let y = Tensor::from_parts(vec![m, n], data);
        tape.push("concat_cols", y, parts, move |g, need| {
            let mut off = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &nd)| {
                    let o = off;
                    off += w;
                    nd.then(|| {
                        let mut out = vec![0.0; m * w];
                        for r in 0..m {
                            out[r * w..(r + 1) * w].copy_from_slice(&g[r * n + o..r * n + o + w]);
                        }
                        out
                    })
                })
                .collect()
        })
    }

    /// Columns `start..end` of a `[m,n]` matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let (m, n) = x.dims2();
        contract!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        let w = end - start;
        let mut data = vec![0.0; m * w];
        for r in 0..m {
            data[r * w..(r + 1) * w].copy_from_slice(&x.data()[r * n + start..r * n + end]);
        }
        let y = Tensor::from_parts(vec![m, w], data);
        self.tape.push("slice_cols", y, &[self], move |g, _| {
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                out[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![Some(out)]
        })
    }

    /// Diagonal of a square matrix.
    pub fn diag(self) -> Var<'t> {
        let x = self.value();
        let (m, n) = x.dims2();
        contract!(m == n && x.rank() == 2, "diag of {:?}", x.shape());
        let y = Tensor::from_parts(vec![n], (0..n).map(|i| x.data()[i * n + i]).collect());
        self.tape.push("diag", y, &[self], move |g, _| {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                out[i * n + i] = g[i];
            }
            vec![Some(out)]
        })
    }

    /// Gather rows of an embedding table `[V, d]`.
    pub fn embedding(self, ids: &[usize]) -> Var<'t> {
        let table = self.value();
        let (v, d) = table.dims2();
        contract!(!ids.is_empty(), "embedding lookup with no ids");
        contract!(ids.iter().all(|&i| i < v), "embedding id out of range (table has {v} rows)");
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(table.row(i));
        }
        let y = Tensor::from_parts(vec![ids.len(), d], data);
        let ids = ids.to_vec();
        self.tape.push("embedding", y, &[self], move |g, _| {
            let mut out = vec![0.0; v * d];
            for (k, &i) in ids.iter().enumerate() {
                out[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[k * d..(k + 1) * d])
                    .for_each(|(o, gg)| *o += gg);
            }
            vec![Some(out)]
        })
    }

    /// Scale each row to unit L2 norm. Fails on an all-zero row instead of dividing.
    pub fn l2_normalize_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2();
        let mut norms = vec![0.0; m];
        let mut y = x.to_vec();
        for (r, row) in y.chunks_mut(n).enumerate() {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(Error::Numeric {
                    op: "l2_normalize".into(),
                    detail: format!("row {r} has norm {nrm}"),
                });
            }
            norms[r] = nrm;
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let ys = y.clone();
        Ok(self.tape.push("l2_normalize", y, &[self], move |g, _| {
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                let yr = &ys.data()[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    out[r * n + j] = (gr[j] - yr[j] * dot) / norms[r];
                }
            }
            vec![Some(out)]
        }))
    }

    /// Elementwise Huber penalty of `self - target`.
    pub fn huber(self, target: &[f64], delta: f64) -> Var<'t> {
        let x = self.value();
        contract!(x.len() == target.len(), "huber: {} predictions vs {} targets", x.len(), target.len());
        contract!(delta > 0.0, "huber delta must be positive");
        let e: Vec<f64> = x.data().iter().zip(target).map(|(p, t)| p - t).collect();
        let y = e
            .iter()
            .map(|&e| {
                if e.abs() <= delta {
                    0.5 * e * e
                } else {
                    delta * (e.abs() - 0.5 * delta)
                }
            })
            .collect();
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        self.tape.push("huber", y, &[self], move |g, _| {
            vec![Some(
                g.iter().zip(&e).map(|(g, &e)| g * e.clamp(-delta, delta)).collect(),
            )]
        })
    }

    /// Unfold a zero-padded `[C,T,H,W]` volume into one row per cube:
    /// `[L, C*kt*kh*kw]`.
    ///
    /// Followed by a linear map this is a strided 3-D convolution whose output
    /// is laid out token-major.
    pub fn im2col3d(self, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Var<'t> {
        const PAD: usize = usize::MAX;
        let x = self.value();
        let s = x.shape().to_vec();
        contract!(s.len() == 4, "im2col3d expects [C,T,H,W], got {s:?}");
        let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
        let [kt, kh, kw] = kernel;
        let padded = [t + 2 * padding[0], h + 2 * padding[1], w + 2 * padding[2]];
        contract!(
            padded[0] >= kt && padded[1] >= kh && padded[2] >= kw,
            "input {s:?} smaller than cube {kernel:?}"
        );
        let grid = conv_grid(padded, kernel, stride);
        let l = grid[0] * grid[1] * grid[2];
        let k = c * kt * kh * kw;
        let coord = |g: usize, d: usize, axis: usize, len: usize| -> Option<usize> {
            (g * stride[axis] + d).checked_sub(padding[axis]).filter(|&v| v < len)
        };
        let mut index = Vec::with_capacity(l * k);
        for gt in 0..grid[0] {
            for gh in 0..grid[1] {
                for gw in 0..grid[2] {
                    for ci in 0..c {
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let i = match (coord(gt, dt, 0, t), coord(gh, dh, 1, h), coord(gw, dw, 2, w)) {
                                        (Some(tt), Some(hh), Some(ww)) => ((ci * t + tt) * h + hh) * w + ww,
                                        _ => PAD,
                                    };
                                    index.push(i);
                                }
                            }
                        }
                    }
                }
            }
        }
        let data: Vec<f64> = index
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { x.data()[i] })
            .collect();
        let y = Tensor::from_parts(vec![l, k], data);
        let total = x.len();
        self.tape.push("im2col3d", y, &[self], move |g, _| {
            let mut out = vec![0.0; total];
            for (gv, &i) in g.iter().zip(&index) {
                if i != PAD {
                    out[i] += gv;
                }
            }
            vec![Some(out)]
        })
    }

    /// Average-pool a token sequence laid out on a `(T,H,W)` grid.
    ///
    /// When `has_cls` is set, row 0 is a class token and passes through
    /// untouched. Windows are `stride`-sized and non-overlapping; partial
    /// windows at the far edges average over the cells they contain.
    pub fn pool_grid(self, grid: [usize; 3], stride: [usize; 3], has_cls: bool) -> Var<'t> {
        let x = self.value();
        let (rows, d) = x.dims2();
        let off = usize::from(has_cls);
        let l = grid[0] * grid[1] * grid[2];
        contract!(rows == l + off, "pool_grid: {rows} rows for grid {grid:?} (cls={has_cls})");
        if stride == [1, 1, 1] {
            return self;
        }
        let out_grid = pooled_grid(grid, stride);
        let lo = out_grid[0] * out_grid[1] * out_grid[2];
        // For every output cell, the list of input rows it averages.
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); lo];
        for t in 0..grid[0] {
            for h in 0..grid[1] {
                for w in 0..grid[2] {
                    let o = ((t / stride[0]) * out_grid[1] + h / stride[1]) * out_grid[2] + w / stride[2];
                    members[o].push(off + (t * grid[1] + h) * grid[2] + w);
                }
            }
        }
        let mut y = vec![0.0; (lo + off) * d];
        if has_cls {
            y[..d].copy_from_slice(&x.data()[..d]);
        }
        for (o, mem) in members.iter().enumerate() {
            let inv = 1.0 / mem.len() as f64;
            let dst = &mut y[(o + off) * d..(o + off + 1) * d];
            for &r in mem {
                dst.iter_mut().zip(x.row(r)).for_each(|(a, b)| *a += b * inv);
            }
        }
        let y = Tensor::from_parts(vec![lo + off, d], y);
        self.tape.push("pool_grid", y, &[self], move |g, _| {
            let mut out = vec![0.0; rows * d];
            if off == 1 {
                out[..d].copy_from_slice(&g[..d]);
            }
            for (o, mem) in members.iter().enumerate() {
                let inv = 1.0 / mem.len() as f64;
                let src = &g[(o + off) * d..(o + off + 1) * d];
                for &r in mem {
                    out[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b * inv);
                }
            }
            vec![Some(out)]
        })
    }
}

/// Output grid of a strided valid convolution: `floor((dim - k)/s) + 1`.
pub fn conv_grid(dims: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|i| (dims[i] - kernel[i]) / stride[i] + 1)
}

/// Grid after pooling with the given stride, rounding up.
pub fn pooled_grid(grid: [usize; 3], stride: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|i| grid[i].div_ceil(stride[i]))
}
