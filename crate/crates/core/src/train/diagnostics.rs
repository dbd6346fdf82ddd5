//! Variance diagnostics: total-variance decomposition of advantages, per-trajectory
//! gradient covariance, and the `O(1/√N)` convergence check on a synthetic bandit.

use super::gradient::{trajectory_gradients, StepRef};
use super::policy::{sample_index, softmax, PolicyParams};
use super::TrainError;
use crate::aggregate::AdvantageSet;
use crate::envs::game_rng;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdvantageVarianceReport {
    pub n: usize,
    pub var_raw: f64,
    pub var_aggregated: f64,
    /// `E[Var(A | key)]`.
    pub expected_conditional: f64,
    /// `|Var(A) − Var(Ã) − E[Var(A | key)]|`.
    pub residual: f64,
}

/// Law-of-total-variance terms for raw values `a`, pooled values `a_tilde` and keys.
pub fn variance_decomposition(a: &[f64], a_tilde: &[f64], keys: &[usize]) -> Result<AdvantageVarianceReport, TrainError> {
    if a.is_empty() || a.len() != a_tilde.len() || a.len() != keys.len() {
        return Err(TrainError::Invalid(format!("lengths {} / {} / {}", a.len(), a_tilde.len(), keys.len())));
    }
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&k, &x) in keys.iter().zip(a) {
        groups.entry(k).or_default().push(x);
    }
    let n = a.len();
    let expected_conditional = groups.values().map(|g| g.len() as f64 * variance(g)).sum::<f64>() / n as f64;
    let var_raw = variance(a);
    let var_aggregated = variance(a_tilde);
    Ok(AdvantageVarianceReport {
        n,
        var_raw,
        var_aggregated,
        expected_conditional,
        residual: (var_raw - var_aggregated - expected_conditional).abs(),
    })
}

pub fn advantage_variance_report(adv: &AdvantageSet) -> Result<AdvantageVarianceReport, TrainError> {
    variance_decomposition(&adv.flat_raw(), &adv.flat_aggregated(), &adv.flat_keys())
}

/// Trace of the population covariance of the sample vectors.
pub fn covariance_trace(samples: &[Vec<f64>]) -> f64 {
    let n = samples.len() as f64;
    let dim = samples.first().map_or(0, Vec::len);
    let mut m = vec![0.0; dim];
    for s in samples {
        for (a, x) in m.iter_mut().zip(s) {
            *a += x;
        }
    }
    m.iter_mut().for_each(|a| *a /= n);
    samples.iter().map(|s| s.iter().zip(&m).map(|(x, a)| (x - a).powi(2)).sum::<f64>()).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientVarianceReport {
    pub n: usize,
    pub trace_raw: f64,
    pub trace_aggregated: f64,
    /// `trace_aggregated / trace_raw`.
    pub ratio: f64,
    pub reduced: bool,
}

/// Covariance traces of per-trajectory gradient sums under A and under Ã.
pub fn gradient_variance_report(p: &PolicyParams, steps: &[Vec<StepRef>], adv: &AdvantageSet) -> Result<GradientVarianceReport, TrainError> {
    if steps.is_empty() {
        return Err(TrainError::Invalid("no trajectories".into()));
    }
    let raw = covariance_trace(&trajectory_gradients(p, steps, &adv.raw)?);
    let agg = covariance_trace(&trajectory_gradients(p, steps, &adv.aggregated)?);
    Ok(GradientVarianceReport {
        n: steps.len(),
        trace_raw: raw,
        trace_aggregated: agg,
        ratio: if raw > 0.0 { agg / raw } else { 1.0 },
        reduced: agg <= raw,
    })
}

/// One-context softmax bandit with Bernoulli rewards and a partition of the arms.
/// Arms in the same cluster share a reward mean, so pooled advantages stay unbiased.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBandit {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub clusters: Vec<usize>,
}

impl SyntheticBandit {
    pub fn new(logits: Vec<f64>, means: Vec<f64>, clusters: Vec<usize>) -> Result<Self, TrainError> {
        if logits.len() != means.len() || logits.len() != clusters.len() || logits.is_empty() {
            return Err(TrainError::Invalid("bandit arrays must be non-empty and equally long".into()));
        }
        if means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(TrainError::Invalid("reward means must lie in [0, 1]".into()));
        }
        Ok(Self { logits, means, clusters })
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    fn score(&self, probs: &[f64], a: usize) -> Vec<f64> {
        let mut s: Vec<f64> = probs.iter().map(|p| -p).collect();
        s[a] += 1.0;
        s
    }

    /// `g = Σₐ π(a)·∇log π(a)·μₐ`.
    pub fn true_gradient(&self) -> Vec<f64> {
        let probs = self.probs();
        let mut g = vec![0.0; probs.len()];
        for a in 0..probs.len() {
            for (x, s) in g.iter_mut().zip(self.score(&probs, a)) {
                *x += probs[a] * s * self.means[a];
            }
        }
        g
    }

    /// Trace of the covariance of a single-sample raw estimate.
    pub fn single_sample_variance(&self) -> f64 {
        let probs = self.probs();
        let g = self.true_gradient();
        let second: f64 = (0..probs.len())
            .map(|a| probs[a] * self.means[a] * self.score(&probs, a).iter().map(|s| s * s).sum::<f64>())
            .sum();
        second - g.iter().map(|x| x * x).sum::<f64>()
    }

    /// `ĝ` from `n` on-policy draws; with `aggregated`, each reward is replaced by the
    /// sample mean of its arm cluster.
    pub fn estimate(&self, n: usize, aggregated: bool, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
        let probs = self.probs();
        let draws: Vec<(usize, f64)> = (0..n)
            .map(|_| {
                let a = sample_index(&probs, rng);
                let r = if rng.random::<f64>() < self.means[a] { 1.0 } else { 0.0 };
                (a, r)
            })
            .collect();
        let pooled: BTreeMap<usize, f64> = if aggregated {
            let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for &(a, r) in &draws {
                let e = sums.entry(self.clusters[a]).or_default();
                e.0 += r;
                e.1 += 1;
            }
            sums.into_iter().map(|(c, (s, k))| (c, s / k as f64)).collect()
        } else {
            BTreeMap::new()
        };
        let mut g = vec![0.0; probs.len()];
        for &(a, r) in &draws {
            let adv = if aggregated { pooled[&self.clusters[a]] } else { r };
            for (x, s) in g.iter_mut().zip(self.score(&probs, a)) {
                *x += s * adv;
            }
        }
        g.iter_mut().for_each(|x| *x /= n as f64);
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeReport {
    pub n_grid: Vec<usize>,
    pub mean_errors: Vec<f64>,
    pub slope: f64,
}

/// Mean `‖ĝ − g‖₂` per sample size over `replicates` seeded draws. Replicate `r` at
/// grid index `j` uses stream `j·replicates + r`, so raw and pooled runs are paired.
pub fn gradient_errors(gen: &SyntheticBandit, n_grid: &[usize], replicates: usize, aggregated: bool, seed: u64) -> Vec<f64> {
    let g = gen.true_gradient();
    n_grid
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let errs: Vec<f64> = (0..replicates)
                .into_par_iter()
                .map(|r| {
                    let mut rng = game_rng(seed, (j * replicates + r) as u64);
                    let est = gen.estimate(n, aggregated, &mut rng);
                    est.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            mean(&errs)
        })
        .collect()
}

/// Least-squares slope of `y` against `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Log-log slope of the mean estimation error against N.
pub fn convergence_slope_check(
    gen: &SyntheticBandit,
    n_grid: &[usize],
    replicates: usize,
    aggregated: bool,
    seed: u64,
) -> Result<SlopeReport, TrainError> {
    if n_grid.len() < 2 || replicates == 0 {
        return Err(TrainError::Invalid("need at least two sample sizes and one replicate".into()));
    }
    if gen.single_sample_variance() <= 1e-15 {
        return Err(TrainError::Degenerate("the single-sample gradient has zero variance".into()));
    }
    let mean_errors = gradient_errors(gen, n_grid, replicates, aggregated, seed);
    let lx: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = mean_errors.iter().map(|e| e.ln()).collect();
    Ok(SlopeReport { n_grid: n_grid.to_vec(), mean_errors, slope: ols_slope(&lx, &ly) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_decomposition() {
        let r = variance_decomposition(&[1.0, 0.0, 1.0, 0.0], &[0.5; 4], &[0, 0, 1, 1]).unwrap();
        assert_eq!((r.var_raw, r.var_aggregated, r.expected_conditional, r.residual), (0.25, 0.0, 0.25, 0.0));
        let r = variance_decomposition(&[2.0; 3], &[2.0; 3], &[0, 1, 1]).unwrap();
        assert_eq!((r.var_raw, r.var_aggregated, r.expected_conditional), (0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_reward_bandit_has_no_error_and_no_slope() {
        let gen = SyntheticBandit::new(vec![0.0; 3], vec![0.0; 3], vec![0, 0, 1]).unwrap();
        assert!(gradient_errors(&gen, &[4, 16], 5, false, 0).iter().all(|&e| e == 0.0));
        assert!(matches!(convergence_slope_check(&gen, &[4, 16], 5, false, 0), Err(TrainError::Degenerate(_))));
    }
}
