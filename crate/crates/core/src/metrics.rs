//! Internal clustering-quality metrics: silhouette, Calinski–Harabasz and Davies–Bouldin,
//! plus a normalized combined score over a k sweep.

use crate::embed::EmbeddingMatrix;
use crate::hac::ClusterAssignment;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric needs k in {min}..={max}, got k={k}")]
    KOutOfRange { k: usize, min: usize, max: usize },
    #[error("clusters {0} and {1} have coincident centroids")]
    CoincidentCentroids(usize, usize),
    #[error("combined score needs at least 2 distinct k values")]
    TooFewReports,
    #[error("assignment does not match matrix: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub k: usize,
    pub silhouette: f64,
    /// `f64::INFINITY` when the within-cluster dispersion is zero.
    pub chi: f64,
    pub dbi: f64,
    pub combined: f64,
}

impl MetricReport {
    pub fn inv_dbi(&self) -> f64 {
        1.0 / self.dbi
    }
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

fn dist_to_centroid(a: &[f32], c: &[f64]) -> f64 {
    a.iter().zip(c).map(|(x, y)| (*x as f64 - y).powi(2)).sum::<f64>().sqrt()
}

fn check(m: &EmbeddingMatrix, ca: &ClusterAssignment) -> Result<(), MetricError> {
    if ca.labels.len() != m.n() || ca.d != m.d() {
        return Err(MetricError::Mismatch(format!("{} labels/{} dims vs {}×{}", ca.labels.len(), ca.d, m.n(), m.d())));
    }
    Ok(())
}

/// Mean silhouette; members of singleton clusters score 0.
pub fn silhouette_score(m: &EmbeddingMatrix, ca: &ClusterAssignment) -> Result<f64, MetricError> {
    let per_sample = silhouette_samples(m, ca)?;
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

/// Per-row `s(i) = (b − a) / max(a, b)`.
pub fn silhouette_samples(m: &EmbeddingMatrix, ca: &ClusterAssignment) -> Result<Vec<f64>, MetricError> {
    check(m, ca)?;
    let (n, k) = (m.n(), ca.k);
    if k < 2 || k > n {
        return Err(MetricError::KOutOfRange { k, min: 2, max: n });
    }
    let per_sample: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = ca.labels[i] as usize;
            if ca.sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0f64; k];
            for j in 0..n {
                if j != i {
                    sums[ca.labels[j] as usize] += dist(m.row(i), m.row(j));
                }
            }
            let a = sums[own] / (ca.sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / ca.sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    Ok(per_sample)
}

/// Ratio of between- to within-cluster dispersion, scaled by `(n−k)/(k−1)`.
pub fn calinski_harabasz(m: &EmbeddingMatrix, ca: &ClusterAssignment) -> Result<f64, MetricError> {
    check(m, ca)?;
    let (n, k, d) = (m.n(), ca.k, m.d());
    if k < 2 || k + 1 > n {
        return Err(MetricError::KOutOfRange { k, min: 2, max: n.saturating_sub(1) });
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (s, x) in mean.iter_mut().zip(m.row(i)) {
            *s += *x as f64;
        }
    }
    mean.iter_mut().for_each(|s| *s /= n as f64);
    let between: f64 = (0..k)
        .map(|c| ca.sizes[c] as f64 * ca.centroid(c).iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    let within: f64 = (0..n).map(|i| dist_to_centroid(m.row(i), ca.centroid(ca.labels[i] as usize)).powi(2)).sum();
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(between / within * ((n - k) as f64 / (k - 1) as f64))
}

/// Mean over clusters of the worst `(S_i + S_j) / M_ij` ratio.
pub fn davies_bouldin(m: &EmbeddingMatrix, ca: &ClusterAssignment) -> Result<f64, MetricError> {
    check(m, ca)?;
    let (n, k) = (m.n(), ca.k);
    if k < 2 || k > n {
        return Err(MetricError::KOutOfRange { k, min: 2, max: n });
    }
    let mut scatter = vec![0.0f64; k];
    for i in 0..n {
        let c = ca.labels[i] as usize;
        scatter[c] += dist_to_centroid(m.row(i), ca.centroid(c));
    }
    for c in 0..k {
        scatter[c] /= ca.sizes[c] as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i == j {
                continue;
            }
            let mij = ca.centroid(i).iter().zip(ca.centroid(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if mij == 0.0 {
                return Err(MetricError::CoincidentCentroids(i.min(j), i.max(j)));
            }
            worst = worst.max((scatter[i] + scatter[j]) / mij);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Silhouette, CHI and DBI for one cut; `combined` is filled by [`combined_score`].
pub fn metric_report(m: &EmbeddingMatrix, ca: &ClusterAssignment) -> Result<MetricReport, MetricError> {
    Ok(MetricReport {
        k: ca.k,
        silhouette: silhouette_score(m, ca)?,
        chi: calinski_harabasz(m, ca)?,
        dbi: davies_bouldin(m, ca)?,
        combined: f64::NAN,
    })
}

/// Min-max normalizes `values` across the sweep. Infinite values count as the maximum;
/// a constant metric maps to 0.5.
fn normalize(values: &[f64]) -> Vec<f64> {
    let first = values[0];
    if values.iter().all(|v| *v == first) {
        return vec![0.5; values.len()];
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                1.0
            } else if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.0
            }
        })
        .collect()
}

/// Average of the normalized silhouette, CHI and 1/DBI per k.
pub fn combined_score(reports: &[MetricReport]) -> Result<BTreeMap<usize, f64>, MetricError> {
    let distinct: std::collections::BTreeSet<usize> = reports.iter().map(|r| r.k).collect();
    if distinct.len() < 2 || distinct.len() != reports.len() {
        return Err(MetricError::TooFewReports);
    }
    let sil = normalize(&reports.iter().map(|r| r.silhouette).collect::<Vec<_>>());
    let chi = normalize(&reports.iter().map(|r| r.chi).collect::<Vec<_>>());
    let inv = normalize(&reports.iter().map(|r| r.inv_dbi()).collect::<Vec<_>>());
    Ok(reports.iter().enumerate().map(|(i, r)| (r.k, (sil[i] + chi[i] + inv[i]) / 3.0)).collect())
}

/// Fills `combined` in place.
pub fn fill_combined(reports: &mut [MetricReport]) -> Result<(), MetricError> {
    let combined = combined_score(reports)?;
    for r in reports.iter_mut() {
        r.combined = combined[&r.k];
    }
    Ok(())
}
