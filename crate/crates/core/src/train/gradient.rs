//! Policy-gradient estimates from logged trajectories.

use super::policy::PolicyParams;
use super::TrainError;
use crate::aggregate::{project_trajectory, Labeler, ProjectedTrajectory};
use crate::envs::agent::ContextKey;
use crate::envs::IntentTemplateBank;
use crate::traj::TrajectorySet;
use rayon::prelude::*;
use std::collections::BTreeMap;

/// One logged decision: the policy context and the template index taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRef {
    pub context: ContextKey,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub vector: Vec<f64>,
    pub n_trajectories: usize,
    /// Dense per-trajectory gradient sums, when requested.
    pub samples: Option<Vec<Vec<f64>>>,
}

/// Contexts of a projected trajectory paired with the given actions.
pub fn steps_from_projected(p: &ProjectedTrajectory, actions: &[usize], window: usize) -> Vec<StepRef> {
    let pairs: Vec<(u32, u32)> = p.labels.iter().filter_map(|&(a, o)| o.map(|o| (a, o))).collect();
    actions
        .iter()
        .enumerate()
        .map(|(t, &action)| StepRef { context: ContextKey::from_labels(p.opening, &pairs[..t], window), action })
        .collect()
}

/// Resolves every step of `set` to `(context, template)` via the cluster labels and the
/// environment's action bank.
pub fn policy_steps<L: Labeler + Sync + ?Sized>(
    set: &TrajectorySet,
    labels: &L,
    bank: &IntentTemplateBank,
    window: usize,
) -> Result<Vec<Vec<StepRef>>, TrainError> {
    set.trajectories()
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            let projected = project_trajectory(traj, labels)?;
            let actions = traj
                .steps
                .iter()
                .enumerate()
                .map(|(t, s)| {
                    bank.resolve(&s.action.text).map_err(|e| TrainError::Unresolvable { traj: i, step: t + 1, msg: e.to_string() })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(steps_from_projected(&projected, &actions, window))
        })
        .collect()
}

/// Registers every context appearing in `steps`, in first-appearance order.
pub fn register_contexts(p: &mut PolicyParams, steps: &[Vec<StepRef>]) {
    for s in steps.iter().flatten() {
        p.ensure_context(&s.context);
    }
}

fn check_shapes(steps: &[Vec<StepRef>], advantages: &[Vec<f64>]) -> Result<(), TrainError> {
    if steps.len() != advantages.len() {
        return Err(TrainError::Invalid(format!("{} trajectories but {} advantage rows", steps.len(), advantages.len())));
    }
    for (i, (s, a)) in steps.iter().zip(advantages).enumerate() {
        if s.len() != a.len() {
            return Err(TrainError::Unresolvable { traj: i, step: s.len().min(a.len()) + 1, msg: "advantage count differs".into() });
        }
    }
    Ok(())
}

/// `Σₜ ∇log π(aₜ|cₜ)·Aₜ` for one trajectory, as touched blocks in ascending order.
pub fn trajectory_gradient(p: &PolicyParams, steps: &[StepRef], adv: &[f64], traj: usize) -> Result<BTreeMap<usize, Vec<f64>>, TrainError> {
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (t, (s, &a)) in steps.iter().zip(adv).enumerate() {
        let (_, block, grad) = p
            .log_prob_and_grad(&s.context, s.action)
            .map_err(|e| TrainError::Unresolvable { traj, step: t + 1, msg: e.to_string() })?;
        let acc = out.entry(block).or_insert_with(|| vec![0.0; p.num_actions]);
        for (x, g) in acc.iter_mut().zip(&grad) {
            *x += g * a;
        }
    }
    Ok(out)
}

fn densify(p: &PolicyParams, sparse: &BTreeMap<usize, Vec<f64>>) -> Vec<f64> {
    let mut v = vec![0.0; p.num_params()];
    for (&b, g) in sparse {
        v[b * p.num_actions..(b + 1) * p.num_actions].copy_from_slice(g);
    }
    v
}

/// Per-trajectory gradient sums, dense.
pub fn trajectory_gradients(p: &PolicyParams, steps: &[Vec<StepRef>], advantages: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, TrainError> {
    check_shapes(steps, advantages)?;
    (0..steps.len())
        .into_par_iter()
        .map(|i| trajectory_gradient(p, &steps[i], &advantages[i], i).map(|g| densify(p, &g)))
        .collect()
}

/// `ĝ = (1/N) Σᵢ Σₜ ∇log π(aₜ|cₜ)·Aₜ`. Per-trajectory sums run in parallel; the outer
/// sum runs in trajectory order so the result does not depend on thread count.
pub fn estimate_policy_gradient(
    p: &PolicyParams,
    steps: &[Vec<StepRef>],
    advantages: &[Vec<f64>],
    keep_samples: bool,
) -> Result<GradEstimate, TrainError> {
    check_shapes(steps, advantages)?;
    let n = steps.len();
    if n == 0 {
        return Err(TrainError::Invalid("no trajectories".into()));
    }
    let per: Vec<BTreeMap<usize, Vec<f64>>> =
        (0..n).into_par_iter().map(|i| trajectory_gradient(p, &steps[i], &advantages[i], i)).collect::<Result<_, _>>()?;
    let mut vector = vec![0.0; p.num_params()];
    for g in &per {
        for (&b, vals) in g {
            for (x, v) in vector[b * p.num_actions..(b + 1) * p.num_actions].iter_mut().zip(vals) {
                *x += v;
            }
        }
    }
    for x in vector.iter_mut() {
        *x /= n as f64;
    }
    let samples = keep_samples.then(|| per.iter().map(|g| densify(p, g)).collect());
    Ok(GradEstimate { vector, n_trajectories: n, samples })
}
