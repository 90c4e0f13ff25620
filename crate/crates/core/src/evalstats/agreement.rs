use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const Z95: f64 = 1.96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    pub n: usize,
    pub bias: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub bias_ci: (f64, f64),
}

fn check_pairs(preds: &[f64], truths: &[f64], min: usize) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::contract(format!(
            "{} predictions vs {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.len() < min {
        return Err(Error::contract(format!("need at least {min} pairs, got {}", preds.len())));
    }
    if preds.iter().chain(truths).any(|v| !v.is_finite()) {
        return Err(Error::contract("non-finite value in paired data"));
    }
    Ok(())
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Bias and 95% limits of agreement of `preds - truths`.
pub fn bland_altman(preds: &[f64], truths: &[f64]) -> Result<AgreementResult> {
    check_pairs(preds, truths, 2)?;
    let diffs: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| p - t).collect();
    let (bias, sd) = mean_sd(&diffs);
    let se = sd / (diffs.len() as f64).sqrt();
    Ok(AgreementResult {
        n: diffs.len(),
        bias,
        sd_diff: sd,
        loa_low: bias - Z95 * sd,
        loa_high: bias + Z95 * sd,
        bias_ci: (bias - Z95 * se, bias + Z95 * se),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub n: usize,
    pub mae: f64,
    pub mse: f64,
    /// Sample standard deviation of the absolute errors (0 for a single pair).
    pub sd_abs_err: f64,
}

pub fn regression_metrics(preds: &[f64], truths: &[f64]) -> Result<RegressionMetrics> {
    check_pairs(preds, truths, 1)?;
    let abs: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).collect();
    let (mae, sd) = mean_sd(&abs);
    let mse = abs.iter().map(|e| e * e).sum::<f64>() / abs.len() as f64;
    Ok(RegressionMetrics {
        n: abs.len(),
        mae,
        mse,
        sd_abs_err: sd,
    })
}
