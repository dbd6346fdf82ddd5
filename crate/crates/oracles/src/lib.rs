//! Brute-force reference implementations.
//!
//! Everything here is written for clarity, recomputes from raw inputs, and refuses
//! instances above a size cap. Only data types are shared with `intent-core`.

use intent_core::embed::EmbeddingMatrix;
use intent_core::hac::{Dendrogram, Merge};
use intent_core::train::mdp::TabularMdpSpec;
use intent_core::traj::TrajectorySet;
use std::collections::BTreeMap;
use thiserror::Error;

pub const HAC_CAP: usize = 500;
pub const TABLE_CAP: usize = 100_000;
pub const MDP_CAP: usize = 10_000;
/// Relative gap under which two linkage distances count as tied.
pub const TIE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{what}: size {size} over cap {cap}")]
    OverCap { what: &'static str, size: usize, cap: usize },
    #[error("transition row ({state}, {action}) is not a distribution")]
    NonStochastic { state: usize, action: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// An oracle value tagged with the method that produced it and the cap it ran under.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult<T> {
    pub value: T,
    pub method: &'static str,
    pub cap: usize,
}

fn check_cap(what: &'static str, size: usize, cap: usize) -> Result<(), OracleError> {
    if size > cap {
        Err(OracleError::OverCap { what, size, cap })
    } else {
        Ok(())
    }
}

fn point_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s.sqrt()
}

fn rows(m: &EmbeddingMatrix) -> Vec<Vec<f32>> {
    (0..m.n()).map(|i| m.row(i).to_vec()).collect()
}

/// Average-linkage HAC that recomputes every cluster-pair distance from the raw points
/// at every step. Ties within [`TIE`] go to the smallest `(left, right)` node pair;
/// heights are clamped to be non-decreasing.
pub fn naive_average_linkage(m: &EmbeddingMatrix) -> Result<OracleResult<Dendrogram>, OracleError> {
    let n = m.n();
    check_cap("points", n, HAC_CAP)?;
    if n < 2 {
        return Err(OracleError::Invalid(format!("need 2 points, got {n}")));
    }
    let pts = rows(m);
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::new();
    let mut last = 0.0f64;
    while clusters.len() > 1 {
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let (a, b) = (&clusters[x].1, &clusters[y].1);
                let mut total = 0.0;
                for &i in a {
                    for &j in b {
                        total += point_distance(&pts[i], &pts[j]);
                    }
                }
                cand.push((total / (a.len() * b.len()) as f64, x, y));
            }
        }
        let min = cand.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let (d, x, y) = cand
            .into_iter()
            .filter(|c| c.0 <= min + min.abs() * TIE)
            .min_by_key(|c| {
                let (p, q) = (clusters[c.1].0, clusters[c.2].0);
                (p.min(q), p.max(q))
            })
            .expect("at least one pair");
        let (p, q) = (clusters[x].0, clusters[y].0);
        let height = if d > last { d } else { last };
        last = height;
        let id = n + merges.len();
        merges.push(Merge { left: p.min(q), right: p.max(q), height, id });
        let mut members = clusters[x].1.clone();
        members.extend(clusters[y].1.iter().copied());
        clusters.remove(y);
        clusters.remove(x);
        clusters.push((id, members));
    }
    Ok(OracleResult { value: Dendrogram { n, merges }, method: "naive-average-linkage", cap: HAC_CAP })
}

fn centroids(pts: &[Vec<f32>], labels: &[u32], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = pts[0].len();
    let mut c = vec![vec![0.0; d]; k];
    let mut sizes = vec![0usize; k];
    for (p, &l) in pts.iter().zip(labels) {
        sizes[l as usize] += 1;
        for j in 0..d {
            c[l as usize][j] += p[j] as f64;
        }
    }
    for l in 0..k {
        for j in 0..d {
            c[l][j] /= sizes[l] as f64;
        }
    }
    (c, sizes)
}

fn to_centroid(p: &[f32], c: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..p.len() {
        s += (p[j] as f64 - c[j]).powi(2);
    }
    s.sqrt()
}

fn check_labels(m: &EmbeddingMatrix, labels: &[u32], k: usize) -> Result<(), OracleError> {
    if labels.len() != m.n() || k < 2 || labels.iter().any(|&l| l as usize >= k) {
        return Err(OracleError::Invalid("labels must cover every row with values in 0..k, k ≥ 2".into()));
    }
    Ok(())
}

/// Mean silhouette from the textbook definition; singleton members score 0.
pub fn silhouette(m: &EmbeddingMatrix, labels: &[u32], k: usize) -> Result<OracleResult<f64>, OracleError> {
    check_labels(m, labels, k)?;
    let pts = rows(m);
    let n = pts.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == own).collect();
        if same.is_empty() {
            continue;
        }
        let a = same.iter().map(|&j| point_distance(&pts[i], &pts[j])).sum::<f64>() / same.len() as f64;
        let mut b = f64::INFINITY;
        for c in 0..k as u32 {
            let other: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            if c == own || other.is_empty() {
                continue;
            }
            let mean = other.iter().map(|&j| point_distance(&pts[i], &pts[j])).sum::<f64>() / other.len() as f64;
            if mean < b {
                b = mean;
            }
        }
        let denom = if a > b { a } else { b };
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(OracleResult { value: total / n as f64, method: "direct-silhouette", cap: HAC_CAP })
}

/// `[B/(k−1)] / [W/(n−k)]` with between- and within-cluster sums of squares.
pub fn calinski_harabasz(m: &EmbeddingMatrix, labels: &[u32], k: usize) -> Result<OracleResult<f64>, OracleError> {
    check_labels(m, labels, k)?;
    let pts = rows(m);
    let n = pts.len();
    let (c, sizes) = centroids(&pts, labels, k);
    let all = vec![0u32; n];
    let (grand, _) = centroids(&pts, &all, 1);
    let mut between = 0.0;
    for l in 0..k {
        let mut sq = 0.0;
        for j in 0..c[l].len() {
            sq += (c[l][j] - grand[0][j]).powi(2);
        }
        between += sizes[l] as f64 * sq;
    }
    let mut within = 0.0;
    for i in 0..n {
        within += to_centroid(&pts[i], &c[labels[i] as usize]).powi(2);
    }
    let value = (between / (k - 1) as f64) / (within / (n - k) as f64);
    Ok(OracleResult { value, method: "direct-calinski-harabasz", cap: HAC_CAP })
}

/// `(1/k) Σᵢ maxⱼ (Sᵢ + Sⱼ) / ‖cᵢ − cⱼ‖` with `Sᵢ` the mean distance to the centroid.
pub fn davies_bouldin(m: &EmbeddingMatrix, labels: &[u32], k: usize) -> Result<OracleResult<f64>, OracleError> {
    check_labels(m, labels, k)?;
    let pts = rows(m);
    let (c, sizes) = centroids(&pts, labels, k);
    let mut scatter = vec![0.0; k];
    for (p, &l) in pts.iter().zip(labels) {
        scatter[l as usize] += to_centroid(p, &c[l as usize]);
    }
    for l in 0..k {
        scatter[l] /= sizes[l] as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i != j {
                let mut sep = 0.0;
                for x in 0..c[i].len() {
                    sep += (c[i][x] - c[j][x]).powi(2);
                }
                let r = (scatter[i] + scatter[j]) / sep.sqrt();
                if r > worst {
                    worst = r;
                }
            }
        }
        total += worst;
    }
    Ok(OracleResult { value: total / k as f64, method: "direct-davies-bouldin", cap: HAC_CAP })
}

/// Fully materialized intention key: opening label, history pairs, action label.
pub type Key = (Option<u32>, Vec<(u32, u32)>, u32);

/// Reward table by enumerating every `(history, action)` pair, then grouping.
/// `labels[uid]` is the cluster of each utterance. Values are `(mean, count)`.
pub fn exhaustive_reward_table(
    set: &TrajectorySet,
    labels: &[u32],
    gamma: f64,
) -> Result<OracleResult<BTreeMap<Key, (f64, usize)>>, OracleError> {
    let pairs_total: usize = set.trajectories().iter().map(|t| t.steps.len()).sum();
    check_cap("history-action pairs", pairs_total, TABLE_CAP)?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(OracleError::Invalid(format!("gamma {gamma}")));
    }
    let look = |uid: u32| labels.get(uid as usize).copied().ok_or_else(|| OracleError::Invalid(format!("uid {uid} unlabelled")));
    let mut pairs: Vec<(Key, f64)> = Vec::with_capacity(pairs_total);
    for traj in set.trajectories() {
        let opening = traj.opening.as_ref().map(|u| look(u.uid)).transpose()?;
        let horizon = traj.steps.len();
        for t in 0..horizon {
            let mut history = Vec::new();
            for s in &traj.steps[..t] {
                let o = s.observation.as_ref().ok_or_else(|| OracleError::Invalid("missing observation".into()))?;
                history.push((look(s.action.uid)?, look(o.uid)?));
            }
            let mut w = 1.0;
            for _ in 0..horizon - 1 - t {
                w *= gamma;
            }
            pairs.push(((opening, history, look(traj.steps[t].action.uid)?), w * traj.terminal_reward));
        }
    }
    let mut grouped: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for (k, r) in pairs {
        grouped.entry(k).or_default().push(r);
    }
    let value = grouped.into_iter().map(|(k, rs)| (k, (rs.iter().sum::<f64>() / rs.len() as f64, rs.len()))).collect();
    Ok(OracleResult { value, method: "exhaustive-group-by", cap: TABLE_CAP })
}

/// One policy step for [`naive_policy_gradient`]: logit block index and action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaiveStep {
    pub block: usize,
    pub action: usize,
}

/// `(1/N) Σᵢ Σₜ (e_a − π(·|cₜ))·Aₜ` as a plain double loop over trajectories and steps,
/// with each trajectory's sum formed before it is added to the total.
pub fn naive_policy_gradient(
    logits: &[f64],
    num_actions: usize,
    steps: &[Vec<NaiveStep>],
    advantages: &[Vec<f64>],
) -> Result<OracleResult<Vec<f64>>, OracleError> {
    if steps.is_empty() || steps.len() != advantages.len() {
        return Err(OracleError::Invalid("need one advantage row per trajectory".into()));
    }
    let mut total = vec![0.0; logits.len()];
    for (traj, adv) in steps.iter().zip(advantages) {
        let mut own = vec![0.0; logits.len()];
        for (s, &a) in traj.iter().zip(adv) {
            let block = &logits[s.block * num_actions..(s.block + 1) * num_actions];
            let mut max = f64::NEG_INFINITY;
            for &l in block {
                max = max.max(l);
            }
            let exps: Vec<f64> = block.iter().map(|l| (l - max).exp()).collect();
            let mut z = 0.0;
            for e in &exps {
                z += e;
            }
            for b in 0..num_actions {
                let p = exps[b] / z;
                let g = if b == s.action { -p + 1.0 } else { -p };
                own[s.block * num_actions + b] += g * a;
            }
        }
        for i in 0..total.len() {
            total[i] += own[i];
        }
    }
    for x in total.iter_mut() {
        *x /= steps.len() as f64;
    }
    Ok(OracleResult { value: total, method: "naive-double-loop", cap: usize::MAX })
}

/// `Q^π` by repeated Bellman backups until the sup-norm change is at most `1e-12`.
/// `policy[s][a]` is `π(a|s)`; the result is indexed `q[s·|A| + a]`.
pub fn exact_policy_evaluation(spec: &TabularMdpSpec, policy: &[Vec<f64>]) -> Result<OracleResult<Vec<f64>>, OracleError> {
    let (sn, an) = (spec.n_states, spec.n_actions);
    check_cap("state-action pairs", sn * an, MDP_CAP)?;
    if policy.len() != sn || policy.iter().any(|p| p.len() != an) {
        return Err(OracleError::Invalid("policy shape".into()));
    }
    for s in 0..sn {
        for a in 0..an {
            let row = &spec.transitions[(s * an + a) * sn..(s * an + a + 1) * sn];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                return Err(OracleError::NonStochastic { state: s, action: a });
            }
        }
    }
    let mut q = vec![0.0; sn * an];
    loop {
        let v: Vec<f64> = (0..sn).map(|s| (0..an).map(|a| policy[s][a] * q[s * an + a]).sum()).collect();
        let mut next = vec![0.0; sn * an];
        let mut change = 0.0f64;
        for s in 0..sn {
            for a in 0..an {
                let row = &spec.transitions[(s * an + a) * sn..(s * an + a + 1) * sn];
                let mut ev = 0.0;
                for t in 0..sn {
                    ev += row[t] * v[t];
                }
                next[s * an + a] = spec.rewards[s * an + a] + spec.gamma * ev;
                change = change.max((next[s * an + a] - q[s * an + a]).abs());
            }
        }
        q = next;
        if change <= 1e-12 {
            break;
        }
    }
    Ok(OracleResult { value: q, method: "fixed-point-iteration", cap: MDP_CAP })
}
