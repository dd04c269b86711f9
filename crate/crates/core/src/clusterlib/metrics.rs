//! Partition agreement and clustering quality.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::embed::{EmbeddingSource, EmbeddingVector};
use super::hdbscan::ClusterLabels;
use crate::error::{Result, SageError};

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Contingency counts keyed by (truth, predicted). Noise is a label of its own.
fn contingency(a: &[i32], b: &[i32]) -> (BTreeMap<(i32, i32), usize>, BTreeMap<i32, usize>, BTreeMap<i32, usize>) {
    let mut table = BTreeMap::new();
    let mut rows = BTreeMap::new();
    let mut cols = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }
    (table, rows, cols)
}

fn check_lengths(a: &ClusterLabels, b: &ClusterLabels) -> Result<()> {
    if a.len() != b.len() {
        return Err(SageError::InvalidInput(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(SageError::InvalidInput("empty labeling".into()));
    }
    Ok(())
}

/// Adjusted Rand index. Returns 1 when the expected and maximum index
/// coincide (for example both labelings put everything together).
pub fn adjusted_rand_index(a: &ClusterLabels, b: &ClusterLabels) -> Result<f64> {
    check_lengths(a, b)?;
    let (table, rows, cols) = contingency(&a.labels, &b.labels);
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let sa: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sb: f64 = cols.values().map(|&c| comb2(c)).sum();
    let total = comb2(a.len());
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = (sa + sb) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringQuality {
    pub homogeneity: f64,
    pub completeness: f64,
    pub nmi: f64,
    pub central_similarity: f64,
    pub cluster_sample_std: f64,
}

fn entropy(counts: &BTreeMap<i32, usize>, n: f64) -> f64 {
    counts
        .values()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity, completeness and NMI (arithmetic normalization), natural logs.
pub fn information_scores(truth: &ClusterLabels, pred: &ClusterLabels) -> Result<(f64, f64, f64)> {
    check_lengths(truth, pred)?;
    let n = truth.len() as f64;
    let (table, rows, cols) = contingency(&truth.labels, &pred.labels);
    let h_c = entropy(&rows, n);
    let h_k = entropy(&cols, n);
    let mut mi = 0.0;
    for (&(t, p), &c) in &table {
        let pij = c as f64 / n;
        let pi = rows[&t] as f64 / n;
        let pj = cols[&p] as f64 / n;
        mi += pij * (pij / (pi * pj)).ln();
    }
    let mi = mi.max(0.0);
    // H(C|K) = H(C) - I, H(K|C) = H(K) - I
    let homogeneity = if h_c == 0.0 { 1.0 } else { (mi / h_c).clamp(0.0, 1.0) };
    let completeness = if h_k == 0.0 { 1.0 } else { (mi / h_k).clamp(0.0, 1.0) };
    let nmi = if h_c == 0.0 && h_k == 0.0 {
        1.0
    } else {
        (mi / ((h_c + h_k) / 2.0)).clamp(0.0, 1.0)
    };
    Ok((homogeneity, completeness, nmi))
}

/// Renormalized mean of unit vectors. A zero mean falls back to the first
/// basis vector.
pub fn centroid(points: &[&EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = points
        .first()
        .ok_or_else(|| SageError::InvalidInput("centroid of an empty set".into()))?;
    let dim = first.dim();
    let mut sum = vec![0.0; dim];
    for p in points {
        if p.dim() != dim {
            return Err(SageError::InvalidInput("centroid over mixed dimensions".into()));
        }
        sum.iter_mut().zip(&p.values).for_each(|(s, v)| *s += v);
    }
    let source = if points.iter().all(|p| p.source == first.source) {
        first.source
    } else {
        EmbeddingSource::Reference
    };
    Ok(EmbeddingVector::normalized(sum, source))
}

fn label_centroids(labels: &ClusterLabels, embeddings: &[EmbeddingVector]) -> Result<Vec<EmbeddingVector>> {
    let mut groups: BTreeMap<i32, Vec<&EmbeddingVector>> = BTreeMap::new();
    for (l, e) in labels.labels.iter().zip(embeddings) {
        if *l >= 0 {
            groups.entry(*l).or_default().push(e);
        }
    }
    groups.values().map(|g| centroid(g)).collect()
}

/// Mean over `new` of the best cosine to any centroid in `old`.
pub fn centroid_set_similarity(old: &[EmbeddingVector], new: &[EmbeddingVector]) -> Result<f64> {
    if old.is_empty() || new.is_empty() {
        return Err(SageError::InvalidInput("centroid set similarity of an empty set".into()));
    }
    let total: f64 = new
        .iter()
        .map(|c| old.iter().map(|o| c.dot(o)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / new.len() as f64)
}

/// Full quality report of `pred` against `truth`.
///
/// Central similarity matches every predicted centroid to its closest truth
/// centroid; noise is excluded. The sample std is the population standard
/// deviation of predicted cluster sizes.
pub fn clustering_quality(
    truth: &ClusterLabels,
    pred: &ClusterLabels,
    embeddings: &[EmbeddingVector],
) -> Result<ClusteringQuality> {
    check_lengths(truth, pred)?;
    if embeddings.len() != truth.len() {
        return Err(SageError::InvalidInput("embeddings and labels differ in length".into()));
    }
    let (homogeneity, completeness, nmi) = information_scores(truth, pred)?;
    let truth_c = label_centroids(truth, embeddings)?;
    let pred_c = label_centroids(pred, embeddings)?;
    let central_similarity = if truth_c.is_empty() || pred_c.is_empty() {
        0.0
    } else {
        centroid_set_similarity(&truth_c, &pred_c)?
    };
    let sizes: Vec<f64> = (0..pred.n_clusters).map(|c| pred.members(c).len() as f64).collect();
    let cluster_sample_std = if sizes.is_empty() {
        0.0
    } else {
        let m = sizes.iter().sum::<f64>() / sizes.len() as f64;
        (sizes.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / sizes.len() as f64).sqrt()
    };
    Ok(ClusteringQuality {
        homogeneity,
        completeness,
        nmi,
        central_similarity,
        cluster_sample_std,
    })
}
