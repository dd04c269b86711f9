//! Density-based clustering (HDBSCAN) over Euclidean distance.
//!
//! Core distances, mutual reachability, an exact Prim minimum spanning
//! tree, single linkage, a condensed tree pruned by `min_cluster_size` and
//! excess-of-mass selection. Deterministic: ties are broken by index.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SageError};

/// Distances below this are clamped so that `1 / d` stays finite.
pub const MIN_DISTANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Neighbourhood size for core distances, the point itself included.
    pub min_samples: usize,
    /// Lets the root be selected when the data has no split worth keeping.
    pub allow_single_cluster: bool,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        HdbscanParams {
            min_cluster_size: 3,
            min_samples: 2,
            allow_single_cluster: true,
        }
    }
}

impl HdbscanParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_cluster_size < 2 {
            return Err(SageError::Config("min_cluster_size must be at least 2".into()));
        }
        if self.min_samples < 1 {
            return Err(SageError::Config("min_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Cluster assignment: `-1` is noise, clusters are `0..n_clusters`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabels {
    pub labels: Vec<i32>,
    pub n_clusters: usize,
}

impl ClusterLabels {
    /// Relabels arbitrary labels to `0..k` in order of first appearance.
    /// Negative labels are noise.
    pub fn from_raw(raw: &[i64]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|&l| {
                if l < 0 {
                    -1
                } else {
                    let next = map.len() as i32;
                    *map.entry(l).or_insert(next)
                }
            })
            .collect();
        ClusterLabels {
            labels,
            n_clusters: map.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == cluster as i32)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn noise(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < 0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_points<P: AsRef<[f64]>>(points: &[P]) -> Result<()> {
    let Some(first) = points.first() else {
        return Ok(());
    };
    let dim = first.as_ref().len();
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(SageError::InvalidInput(format!("point {i} has dimension {}, expected {dim}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(SageError::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
    }
    Ok(())
}

/// Dense pairwise Euclidean distances.
pub fn distance_matrix<P: AsRef<[f64]>>(points: &[P]) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = euclidean(points[i].as_ref(), points[j].as_ref());
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Distance to the `min_samples`-th nearest neighbour, the point itself
/// counted as the first.
pub fn core_distances(dist: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    let n = dist.len();
    let k = min_samples.clamp(1, n.max(1));
    dist.iter()
        .map(|row| {
            let mut r = row.clone();
            r.sort_by(f64::total_cmp);
            r[k - 1]
        })
        .collect()
}

/// `max(core_a, core_b, d(a, b))` for every pair.
pub fn mutual_reachability(dist: &[Vec<f64>], min_samples: usize) -> Vec<Vec<f64>> {
    let core = core_distances(dist, min_samples);
    let n = dist.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[i][j] = dist[i][j].max(core[i]).max(core[j]);
            }
        }
    }
    m
}

/// Exact minimum spanning tree of a complete graph (Prim, O(n^2)).
pub fn prim_mst(weights: &[Vec<f64>]) -> Vec<MstEdge> {
    let n = weights.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let w = weights[current][j];
            if w < best[j] {
                best[j] = w;
                from[j] = current;
            }
            if best[j] < next_w || next == usize::MAX {
                next_w = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge {
            a: from[next].min(next),
            b: from[next].max(next),
            weight: next_w,
        });
        current = next;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Single-linkage merge: `left`, `right` are node ids (points are
/// `0..n`, merges are `n..2n-1`).
#[derive(Debug, Clone, Copy)]
struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

fn single_linkage(n: usize, mst: &[MstEdge]) -> Vec<Merge> {
    let mut edges = mst.to_vec();
    edges.sort_by(|x, y| x.weight.total_cmp(&y.weight).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
    let mut uf = UnionFind::new(2 * n - 1);
    let mut merges = Vec::with_capacity(n - 1);
    for e in edges {
        let ra = uf.find(e.a);
        let rb = uf.find(e.b);
        let node = n + merges.len();
        let size = uf.size[ra] + uf.size[rb];
        uf.parent[ra] = node;
        uf.parent[rb] = node;
        uf.size[node] = size;
        merges.push(Merge {
            left: ra,
            right: rb,
            distance: e.weight,
            size,
        });
    }
    merges
}

/// Edge of the condensed tree: `child` is a cluster id (`>= n`) or a point.
#[derive(Debug, Clone, Copy)]
struct CondensedEdge {
    parent: usize,
    child: usize,
    lambda: f64,
    size: usize,
}

fn condense(n: usize, merges: &[Merge], min_cluster_size: usize) -> Vec<CondensedEdge> {
    let root = 2 * n - 2;
    let node_size = |id: usize| if id < n { 1 } else { merges[id - n].size };
    let leaves = |id: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                stack.push(merges[x - n].left);
                stack.push(merges[x - n].right);
            }
        }
        out
    };

    let mut out = Vec::new();
    let mut next_label = n + 1;
    // (hierarchy node, condensed cluster label)
    let mut queue = std::collections::VecDeque::from([(root, n)]);
    while let Some((node, label)) = queue.pop_front() {
        if node < n {
            continue;
        }
        let m = merges[node - n];
        let lambda = 1.0 / m.distance.max(MIN_DISTANCE);
        let (ls, rs) = (node_size(m.left), node_size(m.right));
        let big_l = ls >= min_cluster_size;
        let big_r = rs >= min_cluster_size;
        match (big_l, big_r) {
            (true, true) => {
                for (child, size) in [(m.left, ls), (m.right, rs)] {
                    out.push(CondensedEdge {
                        parent: label,
                        child: next_label,
                        lambda,
                        size,
                    });
                    queue.push_back((child, next_label));
                    next_label += 1;
                }
            }
            (false, false) => {
                for child in [m.left, m.right] {
                    for p in leaves(child) {
                        out.push(CondensedEdge {
                            parent: label,
                            child: p,
                            lambda,
                            size: 1,
                        });
                    }
                }
            }
            (true, false) | (false, true) => {
                let (keep, drop) = if big_l { (m.left, m.right) } else { (m.right, m.left) };
                for p in leaves(drop) {
                    out.push(CondensedEdge {
                        parent: label,
                        child: p,
                        lambda,
                        size: 1,
                    });
                }
                queue.push_back((keep, label));
            }
        }
    }
    out
}

/// Selected clusters from the condensed tree, as condensed labels.
fn select_clusters(n: usize, tree: &[CondensedEdge], allow_single_cluster: bool) -> Vec<usize> {
    let max_label = tree.iter().flat_map(|e| [e.parent, e.child]).filter(|&c| c >= n).max().unwrap_or(n);
    let n_clusters = max_label + 1 - n;
    let idx = |c: usize| c - n;
    let mut birth = vec![0.0; n_clusters];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for e in tree.iter().filter(|e| e.child >= n) {
        birth[idx(e.child)] = e.lambda;
        children[idx(e.parent)].push(e.child);
    }
    let mut stability = vec![0.0; n_clusters];
    for e in tree {
        let c = idx(e.parent);
        stability[c] += (e.lambda - birth[c]) * e.size as f64;
    }

    let mut selected = vec![false; n_clusters];
    // children always carry larger labels than their parent
    for c in (0..n_clusters).rev() {
        let child_total: f64 = children[c].iter().map(|&ch| stability[idx(ch)]).sum();
        let is_root = c == 0;
        if is_root && !allow_single_cluster {
            break;
        }
        if is_root && children[c].is_empty() {
            selected[c] = true;
            break;
        }
        if stability[c] > child_total {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(d) = stack.pop() {
                selected[idx(d)] = false;
                stack.extend(children[idx(d)].iter().copied());
            }
        } else {
            stability[c] = child_total;
        }
    }
    (0..n_clusters).filter(|&c| selected[c]).map(|c| c + n).collect()
}

fn label_points(n: usize, tree: &[CondensedEdge], selected: &[usize]) -> ClusterLabels {
    let root = n;
    let mut parent_of = std::collections::HashMap::new();
    for e in tree {
        parent_of.insert(e.child, e.parent);
    }
    let mut labels = vec![-1i32; n];
    if selected == [root] {
        labels.iter_mut().for_each(|l| *l = 0);
        return ClusterLabels { labels, n_clusters: 1 };
    }
    for (p, label) in labels.iter_mut().enumerate() {
        let mut c = parent_of.get(&p).copied();
        while let Some(cluster) = c {
            if let Some(pos) = selected.iter().position(|&s| s == cluster) {
                *label = pos as i32;
                break;
            }
            c = parent_of.get(&cluster).copied();
        }
    }
    ClusterLabels {
        labels,
        n_clusters: selected.len(),
    }
}

/// Clusters `points`. Fewer points than `min_cluster_size` yields all noise.
pub fn hdbscan<P: AsRef<[f64]>>(points: &[P], params: &HdbscanParams) -> Result<ClusterLabels> {
    params.validate()?;
    check_points(points)?;
    let n = points.len();
    if n < params.min_cluster_size || n < 2 {
        return Ok(ClusterLabels {
            labels: vec![-1; n],
            n_clusters: 0,
        });
    }
    let dist = distance_matrix(points);
    let mreach = mutual_reachability(&dist, params.min_samples);
    let mst = prim_mst(&mreach);
    let merges = single_linkage(n, &mst);
    let tree = condense(n, &merges, params.min_cluster_size);
    let selected = select_clusters(n, &tree, params.allow_single_cluster);
    Ok(label_points(n, &tree, &selected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(seed: u64, centers: &[[f64; 2]], per: usize, spread: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (k, c) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(vec![c[0] + rng.random_range(-spread..spread), c[1] + rng.random_range(-spread..spread)]);
                truth.push(k);
            }
        }
        (pts, truth)
    }

    #[test]
    fn three_separated_blobs() {
        let (pts, truth) = blobs(3, &[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 10, 0.5);
        let out = hdbscan(&pts, &HdbscanParams::default()).unwrap();
        assert_eq!(out.n_clusters, 3);
        for k in 0..3 {
            let labels: std::collections::HashSet<i32> =
                truth.iter().zip(&out.labels).filter(|(t, _)| **t == k).map(|(_, l)| *l).collect();
            assert_eq!(labels.len(), 1);
            assert!(!labels.contains(&-1));
        }
    }

    #[test]
    fn tiny_inputs_are_noise() {
        let out = hdbscan(&[vec![0.0], vec![1.0]], &HdbscanParams::default()).unwrap();
        assert_eq!(out.labels, vec![-1, -1]);
        assert_eq!(out.n_clusters, 0);
        let none: Vec<Vec<f64>> = Vec::new();
        assert!(hdbscan(&none, &HdbscanParams::default()).unwrap().is_empty());
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![vec![0.5, 0.5]; 8];
        let out = hdbscan(&pts, &HdbscanParams::default()).unwrap();
        assert_eq!(out.n_clusters, 1);
        assert!(out.labels.iter().all(|&l| l == 0));
        let strict = HdbscanParams {
            allow_single_cluster: false,
            ..HdbscanParams::default()
        };
        assert_eq!(hdbscan(&pts, &strict).unwrap().n_clusters, 0);
    }

    #[test]
    fn bad_points_are_rejected() {
        assert!(hdbscan(&[vec![0.0, 1.0], vec![0.0]], &HdbscanParams::default()).is_err());
        assert!(hdbscan(&[vec![f64::NAN]], &HdbscanParams::default()).is_err());
    }

    #[test]
    fn cluster_sizes_respect_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(3..40);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>() * 5.0, rng.random::<f64>()]).collect();
            let params = HdbscanParams {
                min_cluster_size: rng.random_range(2..6),
                ..HdbscanParams::default()
            };
            let out = hdbscan(&pts, &params).unwrap();
            for c in 0..out.n_clusters {
                assert!(out.members(c).len() >= params.min_cluster_size);
            }
            assert!(out.labels.iter().all(|&l| l >= -1 && l < out.n_clusters as i32));
        }
    }

    fn spanning_tree_weight(n: usize, w: &[Vec<f64>], chosen: &[(usize, usize)]) -> Option<f64> {
        let mut uf = UnionFind::new(n);
        let mut total = 0.0;
        for &(a, b) in chosen {
            let (ra, rb) = (uf.find(a), uf.find(b));
            if ra == rb {
                return None;
            }
            uf.parent[ra] = rb;
            total += w[a][b];
        }
        Some(total)
    }

    fn exhaustive_mst_weight(w: &[Vec<f64>]) -> f64 {
        let n = w.len();
        let all: Vec<(usize, usize)> = (0..n).flat_map(|a| ((a + 1)..n).map(move |b| (a, b))).collect();
        let mut best = f64::INFINITY;
        let mut pick = Vec::new();
        fn rec(
            all: &[(usize, usize)],
            start: usize,
            need: usize,
            pick: &mut Vec<(usize, usize)>,
            n: usize,
            w: &[Vec<f64>],
            best: &mut f64,
        ) {
            if pick.len() == need {
                if let Some(t) = spanning_tree_weight(n, w, pick) {
                    *best = best.min(t);
                }
                return;
            }
            for i in start..all.len() {
                if all.len() - i < need - pick.len() {
                    break;
                }
                pick.push(all[i]);
                rec(all, i + 1, need, pick, n, w, best);
                pick.pop();
            }
        }
        rec(&all, 0, n - 1, &mut pick, n, w, &mut best);
        best
    }

    #[test]
    fn prim_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..=7 {
            for _ in 0..3 {
                let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random(), rng.random(), rng.random()]).collect();
                let w = mutual_reachability(&distance_matrix(&pts), 2);
                let mst: f64 = prim_mst(&w).iter().map(|e| e.weight).sum();
                assert!((mst - exhaustive_mst_weight(&w)).abs() < 1e-12, "n = {n}");
            }
        }
    }

    #[test]
    fn core_distance_counts_self() {
        let d = distance_matrix(&[vec![0.0], vec![1.0], vec![3.0]]);
        assert_eq!(core_distances(&d, 1), vec![0.0, 0.0, 0.0]);
        assert_eq!(core_distances(&d, 2), vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn from_raw_relabels() {
        let l = ClusterLabels::from_raw(&[7, 7, -3, 2, 7]);
        assert_eq!(l.labels, vec![0, 0, -1, 1, 0]);
        assert_eq!(l.n_clusters, 2);
    }
}
