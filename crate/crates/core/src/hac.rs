//! Average-linkage agglomerative clustering over embedding rows, nested cuts and
//! nearest-centroid assignment.
//!
//! Node ids follow the usual convention: leaves are the matrix rows `0..n`, the merge at
//! step `s` creates node `n + s`. Distances are Euclidean, computed in f64.

use crate::embed::EmbeddingMatrix;
use crate::io::{f64_from_le_bytes, f64_to_le_bytes, sha256_hex, write_atomic};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Two linkage distances within this relative gap count as tied.
///
/// Lance–Williams updates and direct averaging round differently, so exactly tied
/// clusters (duplicated points) can differ in the last ulp.
pub const TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum HacError {
    #[error("need at least 2 points to cluster, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite coordinate in row {0}")]
    NonFinite(usize),
    #[error("granularity k={k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("dendrogram and matrix disagree: {0}")]
    Mismatch(String),
    #[error("malformed dendrogram: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Checks shape, id and height invariants.
    pub fn validate(&self) -> Result<(), HacError> {
        if self.n < 2 || self.merges.len() != self.n - 1 {
            return Err(HacError::Malformed(format!("{} merges for {} leaves", self.merges.len(), self.n)));
        }
        let mut used = vec![false; 2 * self.n - 1];
        let mut prev = f64::NEG_INFINITY;
        for (s, m) in self.merges.iter().enumerate() {
            if m.id != self.n + s || m.left >= m.right || m.right >= m.id {
                return Err(HacError::Malformed(format!("bad node ids in merge {s}: {m:?}")));
            }
            for c in [m.left, m.right] {
                if used[c] {
                    return Err(HacError::Malformed(format!("node {c} merged twice")));
                }
                used[c] = true;
            }
            if !m.height.is_finite() || m.height < prev {
                return Err(HacError::Malformed(format!("height decreases at merge {s}")));
            }
            prev = m.height;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), HacError> {
        let json = serde_json::to_vec_pretty(self).expect("dendrogram serializes");
        write_atomic(path, &json).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self, HacError> {
        let bytes = fs::read(path).map_err(io(path))?;
        let dg: Dendrogram = serde_json::from_slice(&bytes)
            .map_err(|e| HacError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        dg.validate()?;
        Ok(dg)
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        s += d * d;
    }
    s.sqrt()
}

/// Full n×n matrix of pairwise Euclidean distances between rows.
pub fn distance_matrix(m: &EmbeddingMatrix) -> Vec<f64> {
    let n = m.n();
    let mut dist = vec![0.0; n * n];
    dist.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a = m.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            if j != i {
                *slot = euclidean(a, m.row(j));
            }
        }
    });
    dist
}

/// Builds the average-linkage dendrogram.
///
/// Each step merges the pair with minimum linkage distance; pairs within [`TIE_RTOL`] of
/// the minimum are tied and the smallest `(left, right)` node-id pair wins.
pub fn build_dendrogram(m: &EmbeddingMatrix) -> Result<Dendrogram, HacError> {
    let n = m.n();
    if n < 2 {
        return Err(HacError::TooFewPoints(n));
    }
    if let Some(i) = (0..n).find(|&i| m.row(i).iter().any(|x| !x.is_finite())) {
        return Err(HacError::NonFinite(i));
    }
    let mut dist = distance_matrix(m);
    let mut active = vec![true; n];
    let mut node = (0..n).collect::<Vec<_>>();
    let mut size = vec![1usize; n];
    // Cached nearest neighbour per active slot: (distance, slot).
    let mut nn: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); n];
    let rescan = |i: usize, dist: &[f64], active: &[bool]| -> (f64, usize) {
        let row = &dist[i * n..(i + 1) * n];
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, &d) in row.iter().enumerate() {
            if j != i && active[j] && d < best.0 {
                best = (d, j);
            }
        }
        best
    };
    for i in 0..n {
        nn[i] = rescan(i, &dist, &active);
    }

    let mut merges = Vec::with_capacity(n - 1);
    let mut last_height = 0.0f64;
    for step in 0..n - 1 {
        let min = (0..n).filter(|&i| active[i]).map(|i| nn[i].0).fold(f64::INFINITY, f64::min);
        let threshold = min + min.abs() * TIE_RTOL;
        // Among tied pairs choose the smallest (lo node id, hi node id).
        let mut best: Option<((usize, usize), usize, usize)> = None;
        for i in (0..n).filter(|&i| active[i] && nn[i].0 <= threshold) {
            let row = &dist[i * n..(i + 1) * n];
            for j in 0..n {
                if j != i && active[j] && row[j] <= threshold {
                    let key = (node[i].min(node[j]), node[i].max(node[j]));
                    if best.is_none_or(|(k, _, _)| key < k) {
                        best = Some((key, i, j));
                    }
                }
            }
        }
        let ((left, right), a, b) = best.expect("an active pair exists");
        let height = dist[a * n + b].max(last_height);
        last_height = height;
        let id = n + step;
        merges.push(Merge { left, right, height, id });

        // Slot `keep` holds the new cluster, slot `gone` is retired.
        let (keep, gone) = (a.min(b), a.max(b));
        let (sa, sb) = (size[keep] as f64, size[gone] as f64);
        active[gone] = false;
        for k in 0..n {
            if active[k] && k != keep {
                let d = (sa * dist[keep * n + k] + sb * dist[gone * n + k]) / (sa + sb);
                dist[keep * n + k] = d;
                dist[k * n + keep] = d;
            }
        }
        size[keep] += size[gone];
        node[keep] = id;
        nn[gone] = (f64::INFINITY, usize::MAX);
        nn[keep] = rescan(keep, &dist, &active);
        for k in 0..n {
            if !active[k] || k == keep {
                continue;
            }
            if nn[k].1 == keep || nn[k].1 == gone {
                nn[k] = rescan(k, &dist, &active);
            } else if dist[k * n + keep] < nn[k].0 {
                nn[k] = (dist[k * n + keep], keep);
            }
        }
    }
    let dg = Dendrogram { n, merges };
    debug_assert!(dg.validate().is_ok());
    Ok(dg)
}

/// A flat clustering of the matrix rows into `k` labelled groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub d: usize,
    /// Corpus uid per matrix row.
    pub uids: Vec<u32>,
    /// Label per matrix row.
    pub labels: Vec<u32>,
    /// k×d row-major centroid block.
    pub centroids: Vec<f64>,
    pub sizes: Vec<usize>,
    label_of: HashMap<u32, u32>,
}

impl ClusterAssignment {
    /// Builds an assignment from per-row labels in `0..k`, computing centroids.
    pub fn from_labels(m: &EmbeddingMatrix, labels: Vec<u32>, k: usize) -> Result<Self, HacError> {
        if labels.len() != m.n() {
            return Err(HacError::Mismatch(format!("{} labels for {} rows", labels.len(), m.n())));
        }
        let d = m.d();
        let mut sums = vec![0.0f64; k * d];
        let mut sizes = vec![0usize; k];
        for (row, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= k {
                return Err(HacError::Mismatch(format!("label {l} not below k={k}")));
            }
            sizes[l] += 1;
            for (s, x) in sums[l * d..(l + 1) * d].iter_mut().zip(m.row(row)) {
                *s += *x as f64;
            }
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(HacError::Mismatch(format!("cluster {empty} is empty")));
        }
        for (c, chunk) in sums.chunks_mut(d).enumerate() {
            for s in chunk {
                *s /= sizes[c] as f64;
            }
        }
        let uids = m.uids().to_vec();
        let label_of = uids.iter().copied().zip(labels.iter().copied()).collect();
        Ok(Self { k, d, uids, labels, centroids: sums, sizes, label_of })
    }

    pub fn label(&self, uid: u32) -> Option<u32> {
        self.label_of.get(&uid).copied()
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }

    /// Writes `{k, d, sizes, labels}` JSON plus the centroid block next to it.
    pub fn save(&self, path: &Path) -> Result<(), HacError> {
        let block = f64_to_le_bytes(&self.centroids);
        let block_path = centroid_path(path);
        let rec = AssignmentFile {
            k: self.k,
            d: self.d,
            sizes: self.sizes.clone(),
            labels: self.uids.iter().copied().zip(self.labels.iter().copied()).collect(),
            centroids_file: block_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            centroids_checksum: sha256_hex(&block),
        };
        write_atomic(&block_path, &block).map_err(io(&block_path))?;
        write_atomic(path, &serde_json::to_vec_pretty(&rec).expect("assignment serializes")).map_err(io(path))
    }

    /// Loads an assignment; row order follows `m`.
    pub fn load(path: &Path, m: &EmbeddingMatrix) -> Result<Self, HacError> {
        let rec: AssignmentFile = serde_json::from_slice(&fs::read(path).map_err(io(path))?)
            .map_err(|e| HacError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        let block_path = centroid_path(path);
        let block = fs::read(&block_path).map_err(io(&block_path))?;
        if sha256_hex(&block) != rec.centroids_checksum || block.len() != rec.k * rec.d * 8 {
            return Err(HacError::Io { path: block_path.display().to_string(), msg: "checksum mismatch".into() });
        }
        let labels = m
            .uids()
            .iter()
            .map(|u| rec.labels.get(u).copied().ok_or_else(|| HacError::Mismatch(format!("uid {u} has no label"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut ca = Self::from_labels(m, labels, rec.k)?;
        ca.centroids = f64_from_le_bytes(&block);
        Ok(ca)
    }
}

fn io(p: &Path) -> impl FnOnce(std::io::Error) -> HacError + '_ {
    move |e| HacError::Io { path: p.display().to_string(), msg: e.to_string() }
}

fn centroid_path(path: &Path) -> PathBuf {
    path.with_extension("centroids.bin")
}

#[derive(Serialize, Deserialize)]
struct AssignmentFile {
    k: usize,
    d: usize,
    sizes: Vec<usize>,
    labels: BTreeMap<u32, u32>,
    centroids_file: String,
    centroids_checksum: String,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Per-row labels of the k-cluster cut, ordered by ascending minimum member uid.
pub fn cut_labels(dg: &Dendrogram, k: usize, uids: &[u32]) -> Result<Vec<u32>, HacError> {
    let n = dg.n;
    if k == 0 || k > n {
        return Err(HacError::KOutOfRange { k, n });
    }
    if uids.len() != n {
        return Err(HacError::Mismatch(format!("{} uids for {} leaves", uids.len(), n)));
    }
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    for m in &dg.merges[..n - k] {
        parent[m.left] = m.id;
        parent[m.right] = m.id;
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut min_uid: HashMap<usize, u32> = HashMap::new();
    for (i, &r) in roots.iter().enumerate() {
        let e = min_uid.entry(r).or_insert(uids[i]);
        *e = (*e).min(uids[i]);
    }
    let mut order: Vec<(u32, usize)> = min_uid.into_iter().map(|(r, u)| (u, r)).collect();
    order.sort_unstable();
    let label_of_root: HashMap<usize, u32> = order.iter().enumerate().map(|(l, &(_, r))| (r, l as u32)).collect();
    Ok(roots.iter().map(|r| label_of_root[r]).collect())
}

/// Undoes the last `k−1` merges of `dg`.
pub fn cut_dendrogram(dg: &Dendrogram, k: usize, m: &EmbeddingMatrix) -> Result<ClusterAssignment, HacError> {
    if dg.n != m.n() {
        return Err(HacError::Mismatch(format!("dendrogram has {} leaves, matrix {} rows", dg.n, m.n())));
    }
    let labels = cut_labels(dg, k, m.uids())?;
    ClusterAssignment::from_labels(m, labels, k)
}

/// Label of the centroid nearest to `v`; ties go to the smallest label.
pub fn nearest_centroid_assign(ca: &ClusterAssignment, v: &[f32]) -> Result<u32, HacError> {
    if v.len() != ca.d {
        return Err(HacError::Dimension { expected: ca.d, got: v.len() });
    }
    let mut best = (f64::INFINITY, 0u32);
    for c in 0..ca.k {
        let d2: f64 = ca.centroid(c).iter().zip(v).map(|(a, b)| (a - *b as f64).powi(2)).sum();
        if d2 < best.0 {
            best = (d2, c as u32);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f32]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(&points.iter().map(|p| vec![*p]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn three_points_on_a_line() {
        let m = line(&[0.0, 0.1, 1.0]);
        let dg = build_dendrogram(&m).unwrap();
        assert_eq!((dg.merges[0].left, dg.merges[0].right), (0, 1));
        assert!((dg.merges[0].height - 0.1).abs() < 1e-6);
        assert!((dg.merges[1].height - 0.95).abs() < 1e-6);
        assert_eq!((dg.merges[1].left, dg.merges[1].right), (2, 3));
        let ca = cut_dendrogram(&dg, 2, &m).unwrap();
        assert_eq!(ca.labels, vec![0, 0, 1]);
        assert_eq!(ca.sizes, vec![2, 1]);
    }

    #[test]
    fn identical_points_merge_at_zero() {
        let m = line(&[3.0; 6]);
        let dg = build_dendrogram(&m).unwrap();
        assert!(dg.merges.iter().all(|mg| mg.height == 0.0));
        assert_eq!((dg.merges[0].left, dg.merges[0].right), (0, 1));
    }

    #[test]
    fn extreme_cuts() {
        let m = line(&[0.0, 2.0, 5.0, 9.0]);
        let dg = build_dendrogram(&m).unwrap();
        assert_eq!(cut_dendrogram(&dg, 4, &m).unwrap().labels, vec![0, 1, 2, 3]);
        assert_eq!(cut_dendrogram(&dg, 1, &m).unwrap().labels, vec![0; 4]);
        assert!(matches!(cut_dendrogram(&dg, 5, &m), Err(HacError::KOutOfRange { .. })));
        assert!(matches!(cut_dendrogram(&dg, 0, &m), Err(HacError::KOutOfRange { .. })));
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(matches!(build_dendrogram(&line(&[1.0])), Err(HacError::TooFewPoints(1))));
    }

    #[test]
    fn nearest_centroid_ties_and_exact_hits() {
        let m = line(&[0.0, 2.0, 10.0, 20.0]);
        let ca = ClusterAssignment::from_labels(&m, vec![0, 1, 2, 3], 4).unwrap();
        assert_eq!(nearest_centroid_assign(&ca, &[20.0]).unwrap(), 3);
        assert_eq!(nearest_centroid_assign(&ca, &[1.0]).unwrap(), 0);
        assert!(nearest_centroid_assign(&ca, &[1.0, 2.0]).is_err());
    }
}
