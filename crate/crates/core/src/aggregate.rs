//! Projection of trajectories onto cluster labels, temporal discounting of the terminal
//! reward and pooling of discounted rewards over intention keys.

use crate::hac::ClusterAssignment;
use crate::io::write_atomic;
use crate::traj::{Trajectory, TrajectorySet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_GAMMA: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("discount {0} outside (0, 1]")]
    Gamma(f64),
    #[error("game {game}: utterance uid {uid} has no cluster label")]
    MissingLabel { game: String, uid: u32 },
    #[error("game {game} step {t}: intention key missing from reward table")]
    MissingKey { game: String, t: u32 },
    #[error("reward table file: {0}")]
    File(String),
}

/// Anything that maps an utterance uid to a cluster label.
pub trait Labeler {
    fn label(&self, uid: u32) -> Option<u32>;
}

impl Labeler for ClusterAssignment {
    fn label(&self, uid: u32) -> Option<u32> {
        ClusterAssignment::label(self, uid)
    }
}

/// Labels indexed by uid; `u32::MAX` marks an unlabelled uid.
impl Labeler for [u32] {
    fn label(&self, uid: u32) -> Option<u32> {
        self.get(uid as usize).copied().filter(|l| *l != u32::MAX)
    }
}

impl Labeler for Vec<u32> {
    fn label(&self, uid: u32) -> Option<u32> {
        self.as_slice().label(uid)
    }
}

pub fn check_gamma(gamma: f64) -> Result<(), AggregateError> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(AggregateError::Gamma(gamma))
    }
}

/// `γ^(T−t) · R` for t = 1..T.
pub fn discount_rewards(traj: &Trajectory, gamma: f64) -> Result<Vec<f64>, AggregateError> {
    check_gamma(gamma)?;
    Ok(discounted(traj.terminal_reward, traj.steps.len(), gamma))
}

pub(crate) fn discounted(reward: f64, horizon: usize, gamma: f64) -> Vec<f64> {
    (1..=horizon).map(|t| gamma.powi((horizon - t) as i32) * reward).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTrajectory {
    pub opening: Option<u32>,
    /// `(action label, observation label)` per step.
    pub labels: Vec<(u32, Option<u32>)>,
    pub terminal_reward: f64,
}

impl ProjectedTrajectory {
    pub fn horizon(&self) -> usize {
        self.labels.len()
    }

    /// Intention key of step `t` (1-based): the opening, the pairs of steps `1..t`, and `ã_t`.
    pub fn key(&self, t: usize) -> IntentionKey {
        let history = self.labels[..t - 1]
            .iter()
            .map(|(a, o)| (*a, o.expect("only the final step lacks an observation")))
            .collect();
        IntentionKey { opening: self.opening, history, action: self.labels[t - 1].0 }
    }
}

pub fn project_trajectory<L: Labeler + ?Sized>(traj: &Trajectory, labels: &L) -> Result<ProjectedTrajectory, AggregateError> {
    let look = |uid: u32| {
        labels.label(uid).ok_or_else(|| AggregateError::MissingLabel { game: traj.game_id.clone(), uid })
    };
    Ok(ProjectedTrajectory {
        opening: traj.opening.as_ref().map(|u| look(u.uid)).transpose()?,
        labels: traj
            .steps
            .iter()
            .map(|s| Ok((look(s.action.uid)?, s.observation.as_ref().map(|o| look(o.uid)).transpose()?)))
            .collect::<Result<_, AggregateError>>()?,
        terminal_reward: traj.terminal_reward,
    })
}

pub fn project_set<L: Labeler + Sync + ?Sized>(set: &TrajectorySet, labels: &L) -> Result<Vec<ProjectedTrajectory>, AggregateError> {
    set.trajectories().par_iter().map(|t| project_trajectory(t, labels)).collect()
}

/// Projected history and action label under which rewards are pooled.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IntentionKey {
    pub opening: Option<u32>,
    pub history: Vec<(u32, u32)>,
    pub action: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableEntry {
    pub mean: f64,
    pub count: usize,
}

/// Mean discounted reward and support per intention key, in key order.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    pub k: usize,
    pub gamma: f64,
    keys: Vec<IntentionKey>,
    entries: Vec<TableEntry>,
    index: HashMap<IntentionKey, usize>,
}

impl RewardTable {
    /// Pools `γ^(T−t) R` over keys; sums run in trajectory and step order.
    pub fn from_projected(projected: &[ProjectedTrajectory], gamma: f64, k: usize) -> Result<Self, AggregateError> {
        check_gamma(gamma)?;
        let mut acc: BTreeMap<IntentionKey, (f64, usize)> = BTreeMap::new();
        for p in projected {
            for (i, r) in discounted(p.terminal_reward, p.horizon(), gamma).into_iter().enumerate() {
                let e = acc.entry(p.key(i + 1)).or_insert((0.0, 0));
                e.0 += r;
                e.1 += 1;
            }
        }
        Ok(Self::from_sums(acc, gamma, k))
    }

    fn from_sums(acc: BTreeMap<IntentionKey, (f64, usize)>, gamma: f64, k: usize) -> Self {
        let mut keys = Vec::with_capacity(acc.len());
        let mut entries = Vec::with_capacity(acc.len());
        for (key, (sum, count)) in acc {
            keys.push(key);
            entries.push(TableEntry { mean: sum / count as f64, count });
        }
        let index = keys.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
        Self { k, gamma, keys, entries, index }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key: &IntentionKey) -> Option<TableEntry> {
        self.index.get(key).map(|&i| self.entries[i])
    }

    pub fn entry(&self, id: usize) -> TableEntry {
        self.entries[id]
    }

    pub fn index_of(&self, key: &IntentionKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&IntentionKey, &TableEntry)> {
        self.keys.iter().zip(&self.entries)
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    /// Count-weighted mean over all entries; 0 for an empty table.
    pub fn global_mean(&self) -> f64 {
        let n = self.total_count();
        if n == 0 {
            return 0.0;
        }
        self.entries.iter().map(|e| e.mean * e.count as f64).sum::<f64>() / n as f64
    }

    pub fn to_json(&self) -> String {
        let file = TableFile {
            k: self.k,
            gamma: self.gamma,
            entries: self
                .iter()
                .map(|(key, e)| EntryRecord {
                    opening_label: key.opening,
                    history_labels: key.history.iter().flat_map(|(a, o)| [*a, *o]).collect(),
                    action_label: key.action,
                    mean: e.mean,
                    count: e.count,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AggregateError> {
        let file: TableFile = serde_json::from_str(text).map_err(|e| AggregateError::File(e.to_string()))?;
        check_gamma(file.gamma)?;
        let mut acc = BTreeMap::new();
        let mut means = HashMap::new();
        for e in file.entries {
            if e.history_labels.len() % 2 != 0 || e.count == 0 {
                return Err(AggregateError::File("malformed entry".into()));
            }
            let key = IntentionKey {
                opening: e.opening_label,
                history: e.history_labels.chunks(2).map(|c| (c[0], c[1])).collect(),
                action: e.action_label,
            };
            means.insert(key.clone(), e.mean);
            acc.insert(key, (0.0, e.count));
        }
        let mut t = Self::from_sums(acc, file.gamma, file.k);
        for (key, e) in t.keys.iter().zip(t.entries.iter_mut()) {
            e.mean = means[key];
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<(), AggregateError> {
        write_atomic(path, self.to_json().as_bytes()).map_err(|e| AggregateError::File(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, AggregateError> {
        let text = fs::read_to_string(path).map_err(|e| AggregateError::File(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    opening_label: Option<u32>,
    history_labels: Vec<u32>,
    action_label: u32,
    mean: f64,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    k: usize,
    gamma: f64,
    entries: Vec<EntryRecord>,
}

pub fn build_reward_table<L: Labeler + Sync + ?Sized>(
    set: &TrajectorySet,
    labels: &L,
    gamma: f64,
    k: usize,
) -> Result<RewardTable, AggregateError> {
    RewardTable::from_projected(&project_set(set, labels)?, gamma, k)
}

/// Raw and aggregated per-step advantages, with the table row backing each step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub raw: Vec<Vec<f64>>,
    pub aggregated: Vec<Vec<f64>>,
    pub key_ids: Vec<Vec<usize>>,
}

impl AdvantageSet {
    pub fn num_steps(&self) -> usize {
        self.raw.iter().map(|r| r.len()).sum()
    }

    /// Copy whose aggregated values are the raw ones (no pooling).
    pub fn raw_only(&self) -> Self {
        Self { raw: self.raw.clone(), aggregated: self.raw.clone(), key_ids: self.key_ids.clone() }
    }

    pub fn flat_raw(&self) -> Vec<f64> {
        self.raw.iter().flatten().copied().collect()
    }

    pub fn flat_aggregated(&self) -> Vec<f64> {
        self.aggregated.iter().flatten().copied().collect()
    }

    pub fn flat_keys(&self) -> Vec<usize> {
        self.key_ids.iter().flatten().copied().collect()
    }
}

pub fn assign_advantages_projected(
    projected: &[ProjectedTrajectory],
    table: &RewardTable,
    game_ids: &[&str],
) -> Result<AdvantageSet, AggregateError> {
    let mut out = AdvantageSet { raw: Vec::new(), aggregated: Vec::new(), key_ids: Vec::new() };
    for (n, p) in projected.iter().enumerate() {
        let raw = discounted(p.terminal_reward, p.horizon(), table.gamma);
        let mut agg = Vec::with_capacity(raw.len());
        let mut ids = Vec::with_capacity(raw.len());
        for t in 1..=p.horizon() {
            let id = table.index_of(&p.key(t)).ok_or_else(|| AggregateError::MissingKey {
                game: game_ids.get(n).map(|s| s.to_string()).unwrap_or_default(),
                t: t as u32,
            })?;
            ids.push(id);
            agg.push(table.entries[id].mean);
        }
        out.raw.push(raw);
        out.aggregated.push(agg);
        out.key_ids.push(ids);
    }
    Ok(out)
}

pub fn assign_advantages<L: Labeler + Sync + ?Sized>(
    set: &TrajectorySet,
    labels: &L,
    table: &RewardTable,
) -> Result<AdvantageSet, AggregateError> {
    let projected = project_set(set, labels)?;
    let ids: Vec<&str> = set.trajectories().iter().map(|t| t.game_id.as_str()).collect();
    assign_advantages_projected(&projected, table, &ids)
}
