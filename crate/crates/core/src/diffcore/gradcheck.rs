use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{forward_backward, Binder, ParamSet};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Probe at most this many elements per parameter (sampled with `seed`).
    pub max_elems_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            max_elems_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: for<'t> Fn(&Binder<'t, '_>) -> Result<Var<'t>>,
{
    let tape = Tape::inference();
    let b = Binder::new(&tape, params);
    let loss = f(&b)?;
    let v = loss.value();
    if v.len() != 1 {
        return Err(Error::contract("grad_check needs a scalar function"));
    }
    Ok(v.item())
}

/// Compare reverse-mode gradients of a scalar function with central differences.
///
/// Every parameter is treated as trainable for the duration of the check.
/// Points where the function is not differentiable show up as large relative
/// errors in the report; they do not abort the check.
pub fn grad_check<F>(f: F, params: &ParamSet, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Binder<'t, '_>) -> Result<Var<'t>>,
{
    if opts.h <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut params = params.clone();
    params.set_all_trainable(true);

    let tape = Tape::new();
    let binder = Binder::new(&tape, &params);
    let loss = f(&binder)?;
    let analytic = forward_backward(loss, &binder)?;
    let base = loss.item();

    let probe = evaluate(&f, &params)?;
    let probe2 = evaluate(&f, &params)?;
    if probe.to_bits() != probe2.to_bits() || probe.to_bits() != base.to_bits() {
        return Err(Error::Nondeterministic(format!(
            "repeated evaluations differ: {base} / {probe} / {probe2}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let value = params.tensor(&name)?.clone();
        let n = value.len();
        let idx: Vec<usize> = match opts.max_elems_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let g = &analytic[&name];
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: idx.len(),
        };
        let mut perturbed = params.clone();
        for &i in &idx {
            let mut data = value.to_vec();
            data[i] = value.data()[i] + opts.h;
            perturbed.set_value(&name, Tensor::from_parts(value.shape().to_vec(), data.clone()))?;
            let fp = evaluate(&f, &perturbed)?;
            data[i] = value.data()[i] - opts.h;
            perturbed.set_value(&name, Tensor::from_parts(value.shape().to_vec(), data))?;
            let fm = evaluate(&f, &perturbed)?;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = g.data()[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_err || !err.is_finite() {
                check.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        perturbed.set_value(&name, value)?;
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tol: opts.tol,
    })
}
