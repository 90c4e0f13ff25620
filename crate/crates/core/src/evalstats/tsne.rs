//! Exact t-SNE with the usual optimization schedule: early exaggeration,
//! momentum switch and per-coordinate adaptive gains.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iters: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iters: 500,
            early_exaggeration: 12.0,
            exaggeration_iters: 100,
            learning_rate: 200.0,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    /// Defaults with perplexity `min(30, n / 5)`.
    pub fn for_points(n: usize, seed: u64) -> Self {
        TsneConfig {
            perplexity: 30f64.min(n as f64 / 5.0),
            seed,
            ..TsneConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P || Q) at the initial layout, without exaggeration.
    pub initial_kl: f64,
    pub final_kl: f64,
    pub jittered: bool,
}

fn sq_dists(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row-conditional affinities `p_{j|i}` with per-row precision found by
/// bisection so each row's entropy is `ln(perplexity)` within `tol`.
pub fn conditional_p(d: &[f64], n: usize, perplexity: f64, tol: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let dmin = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut dsum = 0.0;
            for j in 0..n {
                if j != i {
                    let w = (-(row[j] - dmin) * beta).exp();
                    p[i * n + j] = w;
                    sum += w;
                    dsum += w * (row[j] - dmin);
                }
            }
            let h = sum.ln() + beta * dsum / sum;
            for j in 0..n {
                p[i * n + j] /= sum;
            }
            let diff = h - target;
            if diff.abs() < tol {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    p
}

fn kl(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                num[i * n + j] = 1.0 / (1.0 + d);
                z += num[i * n + j];
            }
        }
    }
    p.iter()
        .zip(&num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &q)| pij * (pij / (q / z).max(1e-300)).ln())
        .sum()
}

/// Embed the rows of `x` in two dimensions.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = x.len();
    if n < 4 {
        return Err(Error::contract(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if !(cfg.perplexity > 0.0 && cfg.perplexity < n as f64) {
        return Err(Error::contract(format!(
            "perplexity {} must be in (0, {n})",
            cfg.perplexity
        )));
    }
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::contract("t-SNE rows must be finite and of equal, non-zero length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pts: Vec<Vec<f64>> = x.to_vec();
    let mut d = sq_dists(&pts);
    let dup = (0..n).any(|i| (i + 1..n).any(|j| d[i * n + j] == 0.0));
    if dup {
        log::warn!("duplicate points in t-SNE input; jittering by 1e-9");
        let jitter = Normal::new(0.0, 1e-9).expect("valid");
        for r in pts.iter_mut() {
            r.iter_mut().for_each(|v| *v += jitter.sample(&mut rng));
        }
        d = sq_dists(&pts);
    }
    let cond = conditional_p(&d, n, cfg.perplexity, 1e-5);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-300);
        }
        p[i * n + i] = 0.0;
    }

    let init = Normal::new(0.0, 1e-4).expect("valid");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let initial_kl = kl(&p, &y);
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    for it in 0..cfg.iters {
        let exag = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let mom = if it < cfg.momentum_switch { cfg.momentum } else { cfg.final_momentum };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dd = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                    num[i * n + j] = 1.0 / (1.0 + dd);
                    z += num[i * n + j];
                }
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i != j {
                    let w = (exag * p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                    g[0] += 4.0 * w * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * w * (y[i][1] - y[j][1]);
                }
            }
            for c in 0..2 {
                gains[i][c] = if (g[c] > 0.0) != (update[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    (gains[i][c] * 0.8).max(0.01)
                };
                update[i][c] = mom * update[i][c] - cfg.learning_rate * gains[i][c] * g[c];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        let (mx, my) = y.iter().fold((0.0, 0.0), |(a, b), r| (a + r[0], b + r[1]));
        for r in y.iter_mut() {
            r[0] -= mx / n as f64;
            r[1] -= my / n as f64;
        }
    }
    let final_kl = kl(&p, &y);
    Ok(TsneResult {
        coords: y,
        initial_kl,
        final_kl,
        jittered: dup,
    })
}
