//! Online REINFORCE where fresh rollouts are scored by the reward table.

use super::gradient::{estimate_policy_gradient, register_contexts, steps_from_projected, StepRef};
use super::policy::{ActMode, PolicyActor, PolicyParams};
use super::TrainError;
use crate::aggregate::{ProjectedTrajectory, RewardTable};
use crate::envs::agent::Projector;
use crate::envs::{game_rng, Environment};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Rebuild the table every this many iterations; `None` never rebuilds.
    pub refresh_every: Option<usize>,
    /// Number of most recent trajectories a rebuild uses.
    pub table_window: usize,
    /// Context window W of the policy.
    pub window: usize,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self { iterations: 150, batch_size: 32, refresh_every: Some(50), table_window: 1024, window: 2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnlineReport {
    /// Mean terminal reward of each iteration's batch.
    pub reward_curve: Vec<f64>,
    pub refreshes: usize,
    /// Steps scored by the global-mean fallback.
    pub fallbacks: usize,
}

/// Table score of every step; unseen keys get the count-weighted global mean.
pub fn score_steps(table: &RewardTable, p: &ProjectedTrajectory) -> (Vec<f64>, usize) {
    let mut misses = 0;
    let scores = (1..=p.horizon())
        .map(|t| match table.get(&p.key(t)) {
            Some(e) => e.mean,
            None => {
                misses += 1;
                table.global_mean()
            }
        })
        .collect();
    (scores, misses)
}

/// Runs `cfg.iterations` rounds of roll-out, score, update. Returns the final table.
pub fn train_online(
    p: &mut PolicyParams,
    env: &dyn Environment,
    projector: &Projector,
    table: RewardTable,
    cfg: &OnlineConfig,
) -> Result<(RewardTable, OnlineReport), TrainError> {
    if cfg.batch_size == 0 || cfg.refresh_every == Some(0) {
        return Err(TrainError::Invalid("batch size and refresh period must be positive".into()));
    }
    let mut table = table;
    let mut recent: VecDeque<ProjectedTrajectory> = VecDeque::with_capacity(cfg.table_window);
    let mut report = OnlineReport { reward_curve: Vec::with_capacity(cfg.iterations), refreshes: 0, fallbacks: 0 };
    let bank = env.action_bank();
    for it in 0..cfg.iterations {
        let actor = PolicyActor { params: p, projector, window: cfg.window, mode: ActMode::Sample };
        let batch: Vec<(ProjectedTrajectory, Vec<StepRef>, f64)> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|j| {
                let game = (it * cfg.batch_size + j) as u64;
                let traj = env.play(&actor, format!("online-{it}-{j}"), &mut game_rng(cfg.seed, game))?;
                let proj = projector.project(&traj)?;
                let actions = traj.steps.iter().map(|s| bank.resolve(&s.action.text)).collect::<Result<Vec<_>, _>>()?;
                let steps = steps_from_projected(&proj, &actions, cfg.window);
                Ok((proj, steps, traj.terminal_reward))
            })
            .collect::<Result<_, TrainError>>()?;
        let mut steps = Vec::with_capacity(batch.len());
        let mut advs = Vec::with_capacity(batch.len());
        let mut reward = 0.0;
        for (proj, st, r) in batch {
            let (scores, misses) = score_steps(&table, &proj);
            report.fallbacks += misses;
            reward += r;
            steps.push(st);
            advs.push(scores);
            if recent.len() == cfg.table_window {
                recent.pop_front();
            }
            recent.push_back(proj);
        }
        report.reward_curve.push(reward / cfg.batch_size as f64);
        register_contexts(p, &steps);
        let g = estimate_policy_gradient(p, &steps, &advs, false)?;
        p.ascend(&g.vector, p.learning_rate);
        p.step += 1;
        if cfg.refresh_every.is_some_and(|r| (it + 1) % r == 0) {
            let window: Vec<ProjectedTrajectory> = recent.iter().cloned().collect();
            table = RewardTable::from_projected(&window, table.gamma, table.k)?;
            report.refreshes += 1;
        }
    }
    Ok((table, report))
}
