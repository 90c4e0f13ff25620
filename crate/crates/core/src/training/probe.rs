//! Linear probe on frozen embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::downstream::EmbeddingRow;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub iters: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-2,
            learning_rate: 0.5,
            iters: 500,
        }
    }
}

/// Mean embedding per study, keyed by study id.
pub fn study_means(rows: &[EmbeddingRow]) -> BTreeMap<String, Vec<f64>> {
    let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc
            .entry(r.study_id.clone())
            .or_insert_with(|| (vec![0.0; r.vector.len()], 0));
        e.0.iter_mut().zip(&r.vector).for_each(|(a, v)| *a += v);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// L2-regularized logistic regression by full-batch gradient descent on
/// standardized features. Returns the logits of `test_x`.
pub fn logistic_probe(train_x: &[Vec<f64>], train_y: &[bool], test_x: &[Vec<f64>], cfg: &ProbeConfig) -> Result<Vec<f64>> {
    let n = train_x.len();
    if n == 0 || n != train_y.len() {
        return Err(Error::contract(format!("{n} training rows for {} labels", train_y.len())));
    }
    let d = train_x[0].len();
    if train_x.iter().chain(test_x).any(|r| r.len() != d) {
        return Err(Error::contract("probe rows differ in length"));
    }
    let mean: Vec<f64> = (0..d).map(|j| train_x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = train_x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            v.sqrt().max(1e-12)
        })
        .collect();
    let z = |r: &[f64]| -> Vec<f64> { r.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect() };
    let xs: Vec<Vec<f64>> = train_x.iter().map(|r| z(r)).collect();
    let ys: Vec<f64> = train_y.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..cfg.iters {
        let mut gw: Vec<f64> = w.iter().map(|wi| cfg.l2 * wi).collect();
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let logit = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = crate::diffcore::ops::sigmoid(logit) - y;
            gw.iter_mut().zip(x).for_each(|(g, xi)| *g += err * xi / n as f64);
            gb += err / n as f64;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= cfg.learning_rate * g);
        b -= cfg.learning_rate * gb;
    }
    Ok(test_x
        .iter()
        .map(|r| b + z(r).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>())
        .collect())
}
