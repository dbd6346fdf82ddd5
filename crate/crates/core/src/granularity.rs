//! Reward-oriented choice of the clustering granularity.
//!
//! `SplitScore(k)` is the mean absolute change of a step's pooled reward when the cut
//! moves from k to k+1 clusters. Rewards are min-max normalized per task first so every
//! score lies in `[0, n_k/|D|] ⊆ [0, 1]`, where `n_k` counts the steps whose intention
//! key changes at that split.

use crate::aggregate::{check_gamma, discounted, AggregateError, RewardTable};
use crate::hac::{cut_labels, Dendrogram, HacError};
use crate::traj::{Task, TrajectorySet};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use thiserror::Error;

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_TAU: usize = 10;
pub const DEFAULT_K_MAX: usize = 512;

#[derive(Debug, Error)]
pub enum GranularityError {
    #[error("split score needs 2 <= k < n, got k={k} with n={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("utterance uid {0} is not a dendrogram leaf")]
    UnknownUid(u32),
    #[error(transparent)]
    Hac(#[from] HacError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

/// Terminal rewards min-max normalized within each task; a constant task maps to 0.
pub fn normalized_rewards(set: &TrajectorySet) -> Vec<f64> {
    let mut range: HashMap<Task, (f64, f64)> = HashMap::new();
    for t in set.trajectories() {
        let e = range.entry(t.task).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(t.terminal_reward);
        e.1 = e.1.max(t.terminal_reward);
    }
    set.trajectories()
        .iter()
        .map(|t| {
            let (lo, hi) = range[&t.task];
            if hi > lo {
                (t.terminal_reward - lo) / (hi - lo)
            } else {
                0.0
            }
        })
        .collect()
}

/// Maps uids to leaf rows. Rows follow `uids` order.
fn uid_rows(uids: &[u32]) -> Vec<usize> {
    let max = uids.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut rows = vec![usize::MAX; max];
    for (r, &u) in uids.iter().enumerate() {
        rows[u as usize] = r;
    }
    rows
}

fn labels_by_uid(dg: &Dendrogram, k: usize, uids: &[u32]) -> Result<Vec<u32>, HacError> {
    let per_row = cut_labels(dg, k, uids)?;
    let rows = uid_rows(uids);
    Ok(rows.iter().map(|&r| if r == usize::MAX { u32::MAX } else { per_row[r] }).collect())
}

fn normalized_table(set: &TrajectorySet, labels: &[u32], gamma: f64, k: usize) -> Result<(RewardTable, Vec<crate::aggregate::ProjectedTrajectory>), AggregateError> {
    let mut projected = crate::aggregate::project_set(set, labels)?;
    for (p, r) in projected.iter_mut().zip(normalized_rewards(set)) {
        p.terminal_reward = r;
    }
    Ok((RewardTable::from_projected(&projected, gamma, k)?, projected))
}

/// Pooled normalized reward of every step (trajectory-major) under the k-cut.
fn step_values(set: &TrajectorySet, dg: &Dendrogram, uids: &[u32], k: usize, gamma: f64) -> Result<Vec<f64>, GranularityError> {
    let labels = labels_by_uid(dg, k, uids)?;
    let (table, projected) = normalized_table(set, &labels, gamma, k)?;
    let mut values = Vec::new();
    for p in &projected {
        for t in 1..=p.horizon() {
            let id = table.index_of(&p.key(t)).expect("table built from these keys");
            values.push(table.entry(id).mean);
        }
    }
    Ok(values)
}

fn check_k(dg: &Dendrogram, k: usize) -> Result<(), GranularityError> {
    if k < 2 || k >= dg.n {
        return Err(GranularityError::KOutOfRange { k, n: dg.n });
    }
    Ok(())
}

/// `SplitScore(k)` by materializing both reward tables.
pub fn split_score(set: &TrajectorySet, dg: &Dendrogram, uids: &[u32], k: usize, gamma: f64) -> Result<f64, GranularityError> {
    check_k(dg, k)?;
    check_gamma(gamma)?;
    let coarse = step_values(set, dg, uids, k, gamma)?;
    let fine = step_values(set, dg, uids, k + 1, gamma)?;
    let delta: f64 = coarse.iter().zip(&fine).map(|(a, b)| (b - a).abs()).sum();
    Ok(delta / set.num_pairs() as f64)
}

/// `n_k / |D|`: share of steps whose intention key changes between cuts k and k+1.
pub fn split_score_upper_bound(set: &TrajectorySet, dg: &Dendrogram, uids: &[u32], k: usize) -> Result<f64, GranularityError> {
    check_k(dg, k)?;
    // A step's key changes iff it mentions a member of the cluster being split.
    let split = &dg.merges[dg.n - k - 1];
    let members = leaves_under(dg, split.id);
    let rows = uid_rows(uids);
    let in_split: HashSet<u32> = uids.iter().copied().filter(|u| members.contains(&rows[*u as usize])).collect();
    let mut n_k = 0usize;
    for traj in set.trajectories() {
        let mut seen = traj.opening.as_ref().is_some_and(|o| in_split.contains(&o.uid));
        for s in &traj.steps {
            if in_split.contains(&s.action.uid) {
                seen = true;
            }
            if seen {
                n_k += 1;
                continue;
            }
            // The action was checked; the observation joins the history of later steps.
            if s.observation.as_ref().is_some_and(|o| in_split.contains(&o.uid)) {
                seen = true;
            }
        }
    }
    Ok(n_k as f64 / set.num_pairs() as f64)
}

fn children(dg: &Dendrogram) -> Vec<(usize, usize)> {
    dg.merges.iter().map(|m| (m.left, m.right)).collect()
}

/// Leaf rows under `node`, ascending.
pub fn leaves_under(dg: &Dendrogram, node: usize) -> BTreeSet<usize> {
    let ch = children(dg);
    let mut out = BTreeSet::new();
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x < dg.n {
            out.insert(x);
        } else {
            let (l, r) = ch[x - dg.n];
            stack.push(l);
            stack.push(r);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScoreCurve {
    pub scores: BTreeMap<usize, f64>,
    /// `n_k` per k.
    pub changed: BTreeMap<usize, usize>,
    /// Running maximum of `n_j/|D|` over `j >= k`.
    pub upper_bound: BTreeMap<usize, f64>,
    pub num_pairs: usize,
    pub epsilon: f64,
    pub tau: usize,
    pub k_star: Option<usize>,
}

impl SplitScoreCurve {
    pub fn k_max(&self) -> usize {
        self.scores.keys().next_back().copied().unwrap_or(0)
    }
}

struct Group {
    mean: f64,
}

/// Full sweep over `k ∈ [2, min(k_max, n−1)]`, computed incrementally from the one
/// cluster that each refinement splits.
pub fn sweep(
    set: &TrajectorySet,
    dg: &Dendrogram,
    uids: &[u32],
    gamma: f64,
    k_max: usize,
    epsilon: f64,
    tau: usize,
) -> Result<SplitScoreCurve, GranularityError> {
    check_gamma(gamma)?;
    let n = dg.n;
    let top = k_max.min(n - 1);
    let rows = uid_rows(uids);
    let row_of = |uid: u32| -> Result<usize, GranularityError> {
        rows.get(uid as usize).copied().filter(|r| *r != usize::MAX).ok_or(GranularityError::UnknownUid(uid))
    };

    // Per step: the uids its key is built from, in key order, and its normalized reward.
    let norm = normalized_rewards(set);
    let mut step_uids: Vec<Vec<usize>> = Vec::new();
    let mut step_reward: Vec<f64> = Vec::new();
    for (traj, r) in set.trajectories().iter().zip(&norm) {
        let mut prefix: Vec<usize> = Vec::new();
        if let Some(o) = &traj.opening {
            prefix.push(row_of(o.uid)?);
        }
        let disc = discounted(*r, traj.steps.len(), gamma);
        for (s, v) in traj.steps.iter().zip(disc) {
            let mut key = prefix.clone();
            key.push(row_of(s.action.uid)?);
            step_uids.push(key);
            step_reward.push(v);
            prefix.push(row_of(s.action.uid)?);
            if let Some(o) = &s.observation {
                prefix.push(row_of(o.uid)?);
            }
        }
    }
    let has_opening: Vec<bool> = set
        .trajectories()
        .iter()
        .flat_map(|t| std::iter::repeat_n(t.opening.is_some(), t.steps.len()))
        .collect();
    let num_pairs = step_uids.len();

    let mut row_steps: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (s, rs) in step_uids.iter().enumerate() {
        for &r in rs {
            if row_steps[r].last() != Some(&s) {
                row_steps[r].push(s);
            }
        }
    }

    let mut node_of_row = vec![2 * n - 2; n];
    let key_of = |s: usize, node_of_row: &[usize]| -> Vec<usize> {
        let mut k = Vec::with_capacity(step_uids[s].len() + 1);
        k.push(has_opening[s] as usize);
        k.extend(step_uids[s].iter().map(|&r| node_of_row[r]));
        k
    };

    let mut groups: Vec<Group> = Vec::new();
    let mut step_group = vec![0usize; num_pairs];
    let regroup = |steps: &[usize], node_of_row: &[usize], groups: &mut Vec<Group>, step_group: &mut [usize]| {
        let mut local: HashMap<Vec<usize>, (usize, f64, usize)> = HashMap::new();
        let mut order: Vec<Vec<usize>> = Vec::new();
        let mut keys = Vec::with_capacity(steps.len());
        for &s in steps {
            let key = key_of(s, node_of_row);
            let e = local.entry(key.clone()).or_insert_with(|| {
                order.push(key.clone());
                (0, 0.0, 0)
            });
            e.1 += step_reward[s];
            e.2 += 1;
            keys.push(key);
        }
        for key in &order {
            let e = local.get_mut(key).expect("key present");
            e.0 = groups.len();
            groups.push(Group { mean: e.1 / e.2 as f64 });
        }
        for (&s, key) in steps.iter().zip(&keys) {
            step_group[s] = local[key].0;
        }
    };
    let all: Vec<usize> = (0..num_pairs).collect();
    regroup(&all, &node_of_row, &mut groups, &mut step_group);

    let mut scores = BTreeMap::new();
    let mut changed = BTreeMap::new();
    let mut stamp = vec![usize::MAX; num_pairs];
    for k in 1..=top {
        let split = dg.merges[n - k - 1];
        let mut affected = Vec::new();
        for (child, node) in [(split.left, split.left), (split.right, split.right)] {
            for r in leaves_under(dg, child) {
                node_of_row[r] = node;
                for &s in &row_steps[r] {
                    if stamp[s] != k {
                        stamp[s] = k;
                        affected.push(s);
                    }
                }
            }
        }
        affected.sort_unstable();
        let old: Vec<f64> = affected.iter().map(|&s| groups[step_group[s]].mean).collect();
        regroup(&affected, &node_of_row, &mut groups, &mut step_group);
        if k >= 2 {
            let delta: f64 = affected.iter().zip(&old).map(|(&s, o)| (groups[step_group[s]].mean - o).abs()).sum();
            scores.insert(k, delta / num_pairs as f64);
            changed.insert(k, affected.len());
        }
    }

    let mut upper_bound = BTreeMap::new();
    let mut running = 0usize;
    for (&k, &c) in changed.iter().rev() {
        running = running.max(c);
        upper_bound.insert(k, running as f64 / num_pairs as f64);
    }
    let k_star = select_k(&scores, epsilon, tau);
    Ok(SplitScoreCurve { scores, changed, upper_bound, num_pairs, epsilon, tau, k_star })
}

/// Smallest k with `scores[j] < ε` for every `j ∈ [k, k+τ]`; the whole window must exist.
pub fn select_k(scores: &BTreeMap<usize, f64>, epsilon: f64, tau: usize) -> Option<usize> {
    scores.keys().copied().find(|&k| (k..=k + tau).all(|j| scores.get(&j).is_some_and(|s| *s < epsilon)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_k_rule() {
        let scores: BTreeMap<usize, f64> =
            [(2, 0.5), (3, 0.2), (4, 0.005), (5, 0.004), (6, 0.003), (7, 0.002), (8, 0.001)].into_iter().collect();
        assert_eq!(select_k(&scores, 0.01, 3), Some(4));
        assert_eq!(select_k(&scores, 0.001, 3), None);
        assert_eq!(select_k(&scores, 0.01, 5), None);
    }
}
