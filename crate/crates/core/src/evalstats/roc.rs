use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
}

impl ScoredSample {
    pub fn new(score: f64, label: bool) -> Self {
        ScoredSample { score, label }
    }
}

/// Build samples from parallel score and label slices.
pub fn samples(scores: &[f64], labels: &[bool]) -> Vec<ScoredSample> {
    scores.iter().zip(labels).map(|(&s, &l)| ScoredSample::new(s, l)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// DeLong variance, when computed.
    pub variance: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    /// Set when the DeLong variance is zero and the interval collapses to a point.
    pub degenerate: bool,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub curve: Vec<(f64, f64)>,
}

/// Mann-Whitney kernel: 1 if the positive ranks higher, 1/2 on ties.
fn psi(pos: f64, neg: f64) -> f64 {
    if pos > neg {
        1.0
    } else if pos == neg {
        0.5
    } else {
        0.0
    }
}

fn split(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::contract(format!("non-finite score {}", s.score)));
    }
    let pos: Vec<f64> = samples.iter().filter(|s| s.label).map(|s| s.score).collect();
    let neg: Vec<f64> = samples.iter().filter(|s| !s.label).map(|s| s.score).collect();
    if pos.is_empty() {
        return Err(Error::contract("no positive samples"));
    }
    if neg.is_empty() {
        return Err(Error::contract("no negative samples"));
    }
    Ok((pos, neg))
}

fn curve(samples: &[ScoredSample], n_pos: usize, n_neg: usize) -> Vec<(f64, f64)> {
    let mut sorted: Vec<ScoredSample> = samples.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    pts
}

/// Structural components: per-positive and per-negative placement values.
fn placements(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut v10 = vec![0.0; pos.len()];
    let mut v01 = vec![0.0; neg.len()];
    for (i, &p) in pos.iter().enumerate() {
        for (j, &n) in neg.iter().enumerate() {
            let k = psi(p, n);
            v10[i] += k;
            v01[j] += k;
        }
    }
    v10.iter_mut().for_each(|v| *v /= neg.len() as f64);
    v01.iter_mut().for_each(|v| *v /= pos.len() as f64);
    (v10, v01)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn cov(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Empirical AUROC (Mann-Whitney, ties count one half) and the ROC curve.
pub fn auroc(samples: &[ScoredSample]) -> Result<RocResult> {
    let (pos, neg) = split(samples)?;
    let (v10, _) = placements(&pos, &neg);
    Ok(RocResult {
        auc: mean(&v10),
        n_pos: pos.len(),
        n_neg: neg.len(),
        variance: None,
        ci95: None,
        degenerate: false,
        curve: curve(samples, pos.len(), neg.len()),
    })
}

/// AUROC with DeLong variance and a 95% interval clipped to `[0, 1]`.
pub fn delong_ci(samples: &[ScoredSample]) -> Result<RocResult> {
    let (pos, neg) = split(samples)?;
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::contract(format!(
            "DeLong needs at least two samples per class ({} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let (v10, v01) = placements(&pos, &neg);
    let auc = mean(&v10);
    let var = (cov(&v10, &v10) / pos.len() as f64 + cov(&v01, &v01) / neg.len() as f64).max(0.0);
    let half = Z95 * var.sqrt();
    Ok(RocResult {
        auc,
        n_pos: pos.len(),
        n_neg: neg.len(),
        variance: Some(var),
        ci95: Some(((auc - half).max(0.0), (auc + half).min(1.0))),
        degenerate: var == 0.0,
        curve: curve(samples, pos.len(), neg.len()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelongComparison {
    pub auc_a: f64,
    pub auc_b: f64,
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Paired DeLong test of `auc_a == auc_b` for two score sets on the same labels.
///
/// Zero variance of the difference gives `p = 1` when the AUCs agree and
/// `p = 0` otherwise.
pub fn delong_compare(a: &[ScoredSample], b: &[ScoredSample]) -> Result<DelongComparison> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.label != y.label) {
        return Err(Error::contract("paired comparison needs identical label vectors"));
    }
    let (pa, na) = split(a)?;
    let (pb, nb) = split(b)?;
    if pa.len() < 2 || na.len() < 2 {
        return Err(Error::contract("DeLong needs at least two samples per class"));
    }
    let (a10, a01) = placements(&pa, &na);
    let (b10, b01) = placements(&pb, &nb);
    let (auc_a, auc_b) = (mean(&a10), mean(&b10));
    let s10 = cov(&a10, &a10) + cov(&b10, &b10) - 2.0 * cov(&a10, &b10);
    let s01 = cov(&a01, &a01) + cov(&b01, &b01) - 2.0 * cov(&a01, &b01);
    let variance = (s10 / pa.len() as f64 + s01 / na.len() as f64).max(0.0);
    let diff = auc_a - auc_b;
    let (z, p_value) = if variance <= 1e-300 {
        if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let z = diff / variance.sqrt();
        let n = Normal::standard();
        (z, (2.0 * (1.0 - n.cdf(z.abs()))).min(1.0))
    };
    Ok(DelongComparison {
        auc_a,
        auc_b,
        variance,
        z,
        p_value,
    })
}
