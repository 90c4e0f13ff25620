//! Reference computations written independently of the library.

use cinetext::evalstats::ScoredSample;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Mann-Whitney AUC by direct pair counting, ties worth one half.
pub fn pair_count_auc(s: &[ScoredSample]) -> f64 {
    let pos: Vec<f64> = s.iter().filter(|x| x.label).map(|x| x.score).collect();
    let neg: Vec<f64> = s.iter().filter(|x| !x.label).map(|x| x.score).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

/// Stratified percentile bootstrap interval of the AUC.
pub fn bootstrap_ci(s: &[ScoredSample], reps: usize, seed: u64) -> (f64, f64) {
    let pos: Vec<ScoredSample> = s.iter().copied().filter(|x| x.label).collect();
    let neg: Vec<ScoredSample> = s.iter().copied().filter(|x| !x.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aucs: Vec<f64> = (0..reps)
        .map(|_| {
            let mut draw: Vec<ScoredSample> = (0..pos.len()).map(|_| *pos.choose(&mut rng).unwrap()).collect();
            draw.extend((0..neg.len()).map(|_| *neg.choose(&mut rng).unwrap()));
            pair_count_auc(&draw)
        })
        .collect();
    aucs.sort_by(f64::total_cmp);
    (percentile(&aucs, 0.025), percentile(&aucs, 0.975))
}

/// Paired permutation test of equal AUCs: swap the two scores of each
/// subject with probability one half.
pub fn paired_permutation_p(a: &[ScoredSample], b: &[ScoredSample], reps: usize, seed: u64) -> f64 {
    let observed = (pair_count_auc(a) - pair_count_auc(b)).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    let mut hits = 0usize;
    for _ in 0..reps {
        for i in 0..a.len() {
            if rng.random_bool(0.5) {
                xa[i] = b[i];
                xb[i] = a[i];
            } else {
                xa[i] = a[i];
                xb[i] = b[i];
            }
        }
        if (pair_count_auc(&xa) - pair_count_auc(&xb)).abs() >= observed - 1e-12 {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (reps + 1) as f64
}

/// Balanced set: positives ~ N(shift, 1), negatives ~ N(0, 1).
pub fn gaussian_scores(n: usize, shift: f64, seed: u64) -> Vec<ScoredSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let s = z.sample(&mut rng) + if label { shift } else { 0.0 };
            ScoredSample::new(s, label)
        })
        .collect()
}

/// Two correlated predictors on shared labels; `b` is `a` plus extra signal `delta`.
pub fn paired_scores(n: usize, delta: f64, seed: u64) -> (Vec<ScoredSample>, Vec<ScoredSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2 == 0;
        let y = if label { 1.0 } else { 0.0 };
        let common = z.sample(&mut rng);
        let sa = 0.8 * y + common + 0.7 * z.sample(&mut rng);
        let sb = (0.8 + delta) * y + common + 0.7 * z.sample(&mut rng);
        a.push(ScoredSample::new(sa, label));
        b.push(ScoredSample::new(sb, label));
    }
    (a, b)
}

/// Two Gaussian clusters of `per` points in `d` dimensions, centres `sep` apart.
pub fn two_clusters(per: usize, d: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in 0..2 {
        for _ in 0..per {
            let mut p: Vec<f64> = (0..d).map(|_| z.sample(&mut rng)).collect();
            p[0] += sep * c as f64;
            x.push(p);
            y.push(c == 1);
        }
    }
    (x, y)
}

/// Best accuracy of a threshold on a projection direction, over 360 directions.
pub fn best_linear_accuracy(coords: &[[f64; 2]], labels: &[bool]) -> f64 {
    let n = coords.len();
    let mut best: f64 = 0.0;
    for k in 0..360 {
        let t = (k as f64).to_radians() / 2.0;
        let (s, c) = t.sin_cos();
        let mut proj: Vec<(f64, bool)> = coords.iter().zip(labels).map(|(p, &l)| (p[0] * c + p[1] * s, l)).collect();
        proj.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total_pos = labels.iter().filter(|&&l| l).count();
        let mut pos_below = 0;
        for i in 0..=n {
            if i > 0 && proj[i - 1].1 {
                pos_below += 1;
            }
            let neg_below = i - pos_below;
            let correct = neg_below + (total_pos - pos_below);
            let acc = correct.max(n - correct) as f64 / n as f64;
            best = best.max(acc);
        }
    }
    best
}
