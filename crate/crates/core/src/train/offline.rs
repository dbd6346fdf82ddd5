//! Offline REINFORCE over a fixed corpus.

use super::gradient::{estimate_policy_gradient, register_contexts, StepRef};
use super::policy::PolicyParams;
use super::TrainError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfflineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Heavy-ball coefficient; 0 is plain gradient ascent.
    pub momentum: f64,
    /// Constant subtracted from every advantage.
    pub baseline: Option<f64>,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, momentum: 0.0, baseline: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineReport {
    /// Negative objective `−(1/N) Σᵢ Σₜ log π(aₜ|cₜ)·Aₜ` after each epoch.
    pub loss_curve: Vec<f64>,
    pub updates: u64,
}

/// Negative surrogate objective over the whole corpus.
pub fn surrogate_loss(p: &PolicyParams, steps: &[Vec<StepRef>], advantages: &[Vec<f64>]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (traj, adv) in steps.iter().zip(advantages) {
        for (s, a) in traj.iter().zip(adv) {
            let (lp, _, _) = p.log_prob_and_grad(&s.context, s.action)?;
            total += lp * a;
        }
    }
    Ok(-total / steps.len().max(1) as f64)
}

/// Mini-batch gradient ascent on `J(θ)`; batches are reshuffled each epoch from a stream
/// seeded by `p.seed`.
pub fn train_offline(
    p: &mut PolicyParams,
    steps: &[Vec<StepRef>],
    advantages: &[Vec<f64>],
    cfg: &OfflineConfig,
) -> Result<OfflineReport, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Invalid("batch size must be positive".into()));
    }
    if steps.len() != advantages.len() {
        return Err(TrainError::Invalid(format!("{} trajectories but {} advantage rows", steps.len(), advantages.len())));
    }
    let advantages: Vec<Vec<f64>> = match cfg.baseline {
        Some(b) => advantages.iter().map(|r| r.iter().map(|a| a - b).collect()).collect(),
        None => advantages.to_vec(),
    };
    if advantages.iter().flatten().any(|a| !a.is_finite()) {
        return Err(TrainError::Invalid("non-finite advantage".into()));
    }
    register_contexts(p, steps);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut order: Vec<usize> = (0..steps.len()).collect();
    let mut velocity = vec![0.0; p.num_params()];
    let mut report = OfflineReport { loss_curve: Vec::with_capacity(cfg.epochs), updates: 0 };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let bs: Vec<Vec<StepRef>> = idx.iter().map(|&i| steps[i].clone()).collect();
            let ba: Vec<Vec<f64>> = idx.iter().map(|&i| advantages[i].clone()).collect();
            let g = estimate_policy_gradient(p, &bs, &ba, false)?;
            if g.vector.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch });
            }
            if cfg.momentum == 0.0 {
                p.ascend(&g.vector, p.learning_rate);
            } else {
                for (v, x) in velocity.iter_mut().zip(&g.vector) {
                    *v = cfg.momentum * *v + x;
                }
                p.ascend(&velocity, p.learning_rate);
            }
            p.step += 1;
            report.updates += 1;
        }
        let loss = surrogate_loss(p, steps, &advantages)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: usize::MAX });
        }
        report.loss_curve.push(loss);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::agent::ContextKey;

    fn bandit(n: usize) -> (Vec<Vec<StepRef>>, Vec<Vec<f64>>) {
        let steps = (0..n).map(|i| vec![StepRef { context: ContextKey(vec![]), action: i % 2 }]).collect();
        let adv = (0..n).map(|i| vec![if i % 2 == 0 { 1.0 } else { 0.0 }]).collect();
        (steps, adv)
    }

    #[test]
    fn zero_advantages_leave_parameters_unchanged() {
        let (steps, _) = bandit(8);
        let zeros = vec![vec![0.0]; 8];
        let mut p = PolicyParams::new(2, 0.5, 1);
        train_offline(&mut p, &steps, &zeros, &OfflineConfig { epochs: 5, batch_size: 3, ..Default::default() }).unwrap();
        assert!(p.logits().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn single_positive_action_rises_every_step() {
        let steps = vec![vec![StepRef { context: ContextKey(vec![]), action: 0 }]; 4];
        let adv = vec![vec![0.7]; 4];
        let mut p = PolicyParams::new(2, 0.3, 2);
        let mut last = 0.5;
        for _ in 0..20 {
            train_offline(&mut p, &steps, &adv, &OfflineConfig { epochs: 1, batch_size: 4, ..Default::default() }).unwrap();
            let now = p.block_probs(0)[0];
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn bandit_concentrates_on_best_arm() {
        for seed in 0..5 {
            let (steps, adv) = bandit(16);
            let mut p = PolicyParams::new(2, 0.5, seed);
            let cfg = OfflineConfig { epochs: 200, batch_size: 16, ..Default::default() };
            let rep = train_offline(&mut p, &steps, &adv, &cfg).unwrap();
            assert_eq!(rep.updates, 200);
            assert!(p.block_probs(0)[0] > 0.95, "seed {seed}: {}", p.block_probs(0)[0]);
        }
    }
}
