//! Pseudo-label mining: pairwise distances, k-reciprocal Jaccard re-ranking, density
//! clustering, and nearest-inlier assignment for the leftover outliers.
//!
//! Every stage is deterministic. Ties are always broken toward the lowest sample
//! index, and border points in the density clustering are attached to the cluster of
//! their nearest core point (lowest core index on exact ties) so the produced
//! partition does not depend on traversal order.

use crate::encoder::FeatureMatrix;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k1 = {k1} is out of range for {n} samples (need 1 <= k1 <= n-1)")]
    InvalidK1 { k1: usize, n: usize },
    #[error("eps must be positive and finite, got {0}")]
    InvalidEps(f64),
    #[error("min_pts must be at least 1")]
    InvalidMinPts,
    #[error("no inliers: every sample was classified as an outlier")]
    NoInliers,
    #[error("cannot mine labels from an empty feature set")]
    Empty,
}

/// Which metric a [`DistanceMatrix`] holds; Jaccard entries lie in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
    Jaccard,
}

/// Dense symmetric distance matrix with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
    kind: DistanceKind,
}

impl DistanceMatrix {
    pub fn zeros(n: usize, kind: DistanceKind) -> Self {
        DistanceMatrix {
            n,
            values: vec![0.0; n * n],
            kind,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Euclidean distances between all feature rows.
pub fn pairwise_euclidean(features: &FeatureMatrix) -> DistanceMatrix {
    let n = features.n();
    let mut d = DistanceMatrix::zeros(n, DistanceKind::Euclidean);
    for i in 0..n {
        let a = features.row(i);
        for j in i + 1..n {
            let b = features.row(j);
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            d.set_sym(i, j, sq.sqrt());
        }
    }
    d
}

/// Indices of the `k` nearest neighbors of `i` (self excluded), ties broken by the
/// lower sample index.
fn knn(d: &DistanceMatrix, i: usize, k: usize) -> Vec<u32> {
    let row = d.row(i);
    let mut idx: Vec<u32> = (0..d.n() as u32).filter(|&j| j as usize != i).collect();
    idx.sort_by(|&a, &b| {
        row[a as usize]
            .partial_cmp(&row[b as usize])
            .expect("distances must not be NaN")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Jaccard distances between k-reciprocal neighbor sets:
/// `R(i) = {i} ∪ {j : j ∈ kNN(i) and i ∈ kNN(j)}` and
/// `d(i,j) = 1 - |R(i) ∩ R(j)| / |R(i) ∪ R(j)|`.
pub fn k_reciprocal_jaccard(d: &DistanceMatrix, k1: usize) -> Result<DistanceMatrix, ClusterError> {
    let n = d.n();
    if k1 == 0 || k1 >= n {
        return Err(ClusterError::InvalidK1 { k1, n });
    }
    let mut in_knn = vec![false; n * n];
    for i in 0..n {
        for j in knn(d, i, k1) {
            in_knn[i * n + j as usize] = true;
        }
    }
    // Reciprocal sets kept sorted so set algebra is a linear merge.
    let sets: Vec<Vec<u32>> = (0..n)
        .map(|i| {
            let mut r: Vec<u32> = (0..n as u32)
                .filter(|&j| {
                    let j = j as usize;
                    j == i || (in_knn[i * n + j] && in_knn[j * n + i])
                })
                .collect();
            r.sort_unstable();
            r
        })
        .collect();
    let mut out = DistanceMatrix::zeros(n, DistanceKind::Jaccard);
    for i in 0..n {
        for j in i + 1..n {
            let inter = sorted_intersection_len(&sets[i], &sets[j]);
            let union = sets[i].len() + sets[j].len() - inter;
            out.set_sym(i, j, 1.0 - inter as f64 / union as f64);
        }
    }
    Ok(out)
}

fn sorted_intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut count) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

/// The `p`-th percentile (0..100) of the strict upper-triangle distances, used as the
/// automatic DBSCAN radius: values are sorted ascending and indexed at
/// `round(p/100 * (M-1))`. Floored at 1e-12 so exact-duplicate samples (distance 0)
/// still satisfy the positive-eps contract.
pub fn percentile_eps(d: &DistanceMatrix, p: f64) -> Result<f64, ClusterError> {
    let n = d.n();
    if n < 2 || !(0.0..=100.0).contains(&p) {
        return Err(ClusterError::InvalidEps(p));
    }
    let mut vals = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            vals.push(d.get(i, j));
        }
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("distances must not be NaN"));
    let idx = ((p / 100.0) * (vals.len() - 1) as f64).round() as usize;
    Ok(vals[idx].max(1e-12))
}

/// Density clustering over a precomputed distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DbscanResult {
    /// Cluster index per sample; `None` marks outliers.
    pub assignment: Vec<Option<usize>>,
    pub n_clusters: usize,
}

/// DBSCAN with an inclusive radius: a sample is core when at least `min_pts` samples
/// (itself included) lie within `eps`; clusters are the connected components of core
/// points under the eps-neighbor relation; non-core points within eps of a core join
/// the cluster of their nearest core point (lowest core index on ties); everything
/// else is an outlier.
pub fn dbscan(d: &DistanceMatrix, eps: f64, min_pts: usize) -> Result<DbscanResult, ClusterError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(ClusterError::InvalidEps(eps));
    }
    if min_pts == 0 {
        return Err(ClusterError::InvalidMinPts);
    }
    let n = d.n();
    let neighbors: Vec<Vec<u32>> = (0..n)
        .map(|i| {
            (0..n as u32)
                .filter(|&j| d.get(i, j as usize) <= eps)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut assignment: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0;
    for start in 0..n {
        if !core[start] || assignment[start].is_some() {
            continue;
        }
        let cluster = n_clusters;
        n_clusters += 1;
        let mut queue = VecDeque::from([start]);
        assignment[start] = Some(cluster);
        while let Some(i) = queue.pop_front() {
            for &j in &neighbors[i] {
                let j = j as usize;
                if core[j] && assignment[j].is_none() {
                    assignment[j] = Some(cluster);
                    queue.push_back(j);
                }
            }
        }
    }
    // Border points: nearest core neighbor decides the cluster.
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for &j in &neighbors[i] {
            let j = j as usize;
            if !core[j] {
                continue;
            }
            let dist = d.get(i, j);
            if best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        if let Some((_, j)) = best {
            assignment[i] = assignment[j];
        }
    }
    Ok(DbscanResult {
        assignment,
        n_clusters,
    })
}

/// Full labeling produced by mining: a cluster index for every sample, plus the mask
/// of samples the clustering itself considered inliers.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeling {
    pub labels: Vec<usize>,
    pub inlier_mask: Vec<bool>,
    pub n_clusters: usize,
}

impl PseudoLabeling {
    /// Every sample its own singleton cluster (warm-up / fallback labeling).
    pub fn exemplar(n: usize) -> Self {
        PseudoLabeling {
            labels: (0..n).collect(),
            inlier_mask: vec![true; n],
            n_clusters: n,
        }
    }

    pub fn inlier_fraction(&self) -> f64 {
        if self.inlier_mask.is_empty() {
            return 0.0;
        }
        self.inlier_mask.iter().filter(|&&m| m).count() as f64 / self.inlier_mask.len() as f64
    }
}

/// Gives every outlier the label of its nearest inlier under `d` (lowest inlier index
/// on exact ties). Fails if the clustering produced no inliers at all.
pub fn assign_outliers(
    clusters: &DbscanResult,
    d: &DistanceMatrix,
) -> Result<PseudoLabeling, ClusterError> {
    let n = clusters.assignment.len();
    let inliers: Vec<usize> = (0..n).filter(|&i| clusters.assignment[i].is_some()).collect();
    if inliers.is_empty() {
        return Err(ClusterError::NoInliers);
    }
    let mut labels = vec![0usize; n];
    let mut inlier_mask = vec![false; n];
    for i in 0..n {
        match clusters.assignment[i] {
            Some(c) => {
                labels[i] = c;
                inlier_mask[i] = true;
            }
            None => {
                let mut best = (f64::INFINITY, 0usize);
                for &j in &inliers {
                    let dist = d.get(i, j);
                    if dist < best.0 {
                        best = (dist, j);
                    }
                }
                labels[i] = clusters.assignment[best.1].expect("inlier has a cluster");
            }
        }
    }
    Ok(PseudoLabeling {
        labels,
        inlier_mask,
        n_clusters: clusters.n_clusters,
    })
}

/// Which distance decides the nearest inlier for outlier assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierMetric {
    Jaccard,
    Euclidean,
}

/// Reciprocal-set construction; `Basic` is the plain mutual-kNN set. The enum is the
/// extension point for expanded-set variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReciprocalVariant {
    Basic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningParams {
    /// Reciprocal neighborhood size; `None` selects `min(20, ceil(n/10))`.
    pub k1: Option<usize>,
    /// Percentile of off-diagonal Jaccard distances used as the DBSCAN radius.
    pub eps_percentile: f64,
    /// Fixed radius override; when set, the percentile rule is ignored.
    pub eps_fixed: Option<f64>,
    pub min_pts: usize,
    pub outlier_metric: OutlierMetric,
    pub variant: ReciprocalVariant,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams {
            k1: None,
            eps_percentile: 1.6,
            eps_fixed: None,
            min_pts: 4,
            outlier_metric: OutlierMetric::Jaccard,
            variant: ReciprocalVariant::Basic,
        }
    }
}

impl MiningParams {
    pub fn effective_k1(&self, n: usize) -> usize {
        self.k1
            .unwrap_or_else(|| 20.min((n as f64 / 10.0).ceil() as usize))
            .max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningOutcome {
    pub labeling: PseudoLabeling,
    pub eps: f64,
    pub k1: usize,
}

/// Full mining pipeline: Euclidean distances, k-reciprocal Jaccard distances, DBSCAN,
/// then nearest-inlier assignment of the outliers under the configured metric.
pub fn mine_labels(
    features: &FeatureMatrix,
    params: &MiningParams,
) -> Result<MiningOutcome, ClusterError> {
    let n = features.n();
    if n == 0 {
        return Err(ClusterError::Empty);
    }
    if n == 1 {
        return Ok(MiningOutcome {
            labeling: PseudoLabeling {
                labels: vec![0],
                inlier_mask: vec![true],
                n_clusters: 1,
            },
            eps: 0.0,
            k1: 0,
        });
    }
    let k1 = params.effective_k1(n);
    let euclid = pairwise_euclidean(features);
    let ReciprocalVariant::Basic = params.variant;
    let jaccard = k_reciprocal_jaccard(&euclid, k1)?;
    let eps = match params.eps_fixed {
        Some(eps) => {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(ClusterError::InvalidEps(eps));
            }
            eps
        }
        None => percentile_eps(&jaccard, params.eps_percentile)?,
    };
    let clusters = dbscan(&jaccard, eps, params.min_pts)?;
    let labeling = match params.outlier_metric {
        OutlierMetric::Jaccard => assign_outliers(&clusters, &jaccard)?,
        OutlierMetric::Euclidean => assign_outliers(&clusters, &euclid)?,
    };
    Ok(MiningOutcome {
        labeling,
        eps,
        k1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix_from_points(points: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(points.to_vec())
    }

    fn line_points(xs: &[f64]) -> FeatureMatrix {
        matrix_from_points(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>())
    }

    #[test]
    fn euclidean_triangle() {
        let m = matrix_from_points(&[vec![0.0, 0.0], vec![3.0, 4.0]]);
        let d = pairwise_euclidean(&m);
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn euclidean_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let d = pairwise_euclidean(&matrix_from_points(&points));
        for i in 0..points.len() {
            for j in 0..points.len() {
                let naive: f64 = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert_eq!(d.get(i, j), naive);
            }
        }
    }

    #[test]
    fn reciprocal_jaccard_two_points() {
        let d = pairwise_euclidean(&line_points(&[0.0, 1.0]));
        let j = k_reciprocal_jaccard(&d, 1).unwrap();
        assert_eq!(j.get(0, 1), 0.0);
    }

    #[test]
    fn reciprocal_jaccard_detects_asymmetric_neighbors() {
        // NN(10) = 1 but NN(1) = 0, so R(10) = {10} and R(0) = {0, 1}: disjoint sets.
        let d = pairwise_euclidean(&line_points(&[0.0, 1.0, 10.0]));
        let j = k_reciprocal_jaccard(&d, 1).unwrap();
        assert_eq!(j.get(0, 2), 1.0);
        assert_eq!(j.get(0, 1), 0.0);
    }

    /// Independent set-algebra oracle: recompute reciprocal sets with explicit
    /// membership scans and Jaccard with hash sets.
    fn naive_jaccard(d: &DistanceMatrix, k1: usize) -> DistanceMatrix {
        use std::collections::HashSet;
        let n = d.n();
        let knn_of = |i: usize| -> Vec<usize> {
            let mut all: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            all.sort_by(|&a, &b| {
                d.get(i, a)
                    .partial_cmp(&d.get(i, b))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            all.truncate(k1);
            all
        };
        let sets: Vec<HashSet<usize>> = (0..n)
            .map(|i| {
                let mut r: HashSet<usize> = knn_of(i)
                    .into_iter()
                    .filter(|&j| knn_of(j).contains(&i))
                    .collect();
                r.insert(i);
                r
            })
            .collect();
        let mut out = DistanceMatrix::zeros(n, DistanceKind::Jaccard);
        for i in 0..n {
            for j in i + 1..n {
                let inter = sets[i].intersection(&sets[j]).count() as f64;
                let union = sets[i].union(&sets[j]).count() as f64;
                out.set_sym(i, j, 1.0 - inter / union);
            }
        }
        out
    }

    #[test]
    fn reciprocal_jaccard_matches_set_algebra_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let n = rng.gen_range(4..24);
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let d = pairwise_euclidean(&matrix_from_points(&points));
            let k1 = rng.gen_range(1..n.min(6));
            let fast = k_reciprocal_jaccard(&d, k1).unwrap();
            let slow = naive_jaccard(&d, k1);
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(fast.get(i, j), slow.get(i, j), "trial {trial} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn k1_bounds_are_enforced() {
        let d = pairwise_euclidean(&line_points(&[0.0, 1.0, 2.0]));
        assert!(matches!(
            k_reciprocal_jaccard(&d, 0),
            Err(ClusterError::InvalidK1 { .. })
        ));
        assert!(matches!(
            k_reciprocal_jaccard(&d, 3),
            Err(ClusterError::InvalidK1 { .. })
        ));
    }

    #[test]
    fn dbscan_separates_two_groups_without_outliers() {
        let d = pairwise_euclidean(&line_points(&[0.0, 0.1, 0.2, 10.0, 10.1]));
        let r = dbscan(&d, 0.5, 2).unwrap();
        assert_eq!(r.n_clusters, 2);
        assert!(r.assignment.iter().all(|a| a.is_some()));
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[1], r.assignment[2]);
        assert_eq!(r.assignment[3], r.assignment[4]);
        assert_ne!(r.assignment[0], r.assignment[3]);
    }

    #[test]
    fn dbscan_marks_isolated_points_as_outliers() {
        let d = pairwise_euclidean(&line_points(&[0.0, 0.1, 0.2, 10.0, 10.1, 5.0]));
        let r = dbscan(&d, 0.5, 2).unwrap();
        assert_eq!(r.n_clusters, 2);
        assert_eq!(r.assignment[5], None);
    }

    #[test]
    fn outlier_joins_the_cluster_of_its_nearest_inlier() {
        // 5.0 sits 4.8 from the {0,.1,.2} group and 5.0 from the {10,10.1} group.
        let d = pairwise_euclidean(&line_points(&[0.0, 0.1, 0.2, 10.0, 10.1, 5.0]));
        let r = dbscan(&d, 0.5, 2).unwrap();
        let labeling = assign_outliers(&r, &d).unwrap();
        assert_eq!(labeling.labels[5], labeling.labels[0]);
        assert!(!labeling.inlier_mask[5]);
        assert!(labeling.inlier_mask[..5].iter().all(|&m| m));
        assert_eq!(labeling.n_clusters, 2);
    }

    #[test]
    fn outlier_ties_break_toward_the_lower_sample_index() {
        // Outlier 4 is exactly 1.0 from inlier 0 (cluster of {0,1}) and from inlier 2
        // (cluster of {2,3}); the lower index wins.
        let mut d = DistanceMatrix::zeros(5, DistanceKind::Euclidean);
        d.set_sym(0, 1, 0.1);
        d.set_sym(2, 3, 0.1);
        for (i, j, v) in [(0, 2, 5.0), (0, 3, 5.0), (1, 2, 5.0), (1, 3, 5.0)] {
            d.set_sym(i, j, v);
        }
        d.set_sym(4, 0, 1.0);
        d.set_sym(4, 1, 1.5);
        d.set_sym(4, 2, 1.0);
        d.set_sym(4, 3, 1.5);
        let r = dbscan(&d, 0.2, 2).unwrap();
        assert_eq!(r.n_clusters, 2);
        assert_eq!(r.assignment[4], None);
        let labeling = assign_outliers(&r, &d).unwrap();
        assert_eq!(labeling.labels[4], labeling.labels[0]);
    }

    #[test]
    fn assign_outliers_requires_at_least_one_inlier() {
        let d = pairwise_euclidean(&line_points(&[0.0, 10.0, 20.0]));
        let r = dbscan(&d, 0.5, 2).unwrap();
        assert_eq!(r.n_clusters, 0);
        assert!(matches!(
            assign_outliers(&r, &d),
            Err(ClusterError::NoInliers)
        ));
    }

    #[test]
    fn identical_points_form_a_single_cluster() {
        let d = pairwise_euclidean(&line_points(&[1.5; 6]));
        let r = dbscan(&d, 1e-12, 4).unwrap();
        assert_eq!(r.n_clusters, 1);
        assert!(r.assignment.iter().all(|&a| a == Some(0)));
    }

    /// Brute-force density-reachability oracle: core flags by counting, cluster
    /// membership by union-find over all core pairs within eps, border points to the
    /// nearest core.
    fn dbscan_oracle(d: &DistanceMatrix, eps: f64, min_pts: usize) -> Vec<Option<usize>> {
        let n = d.n();
        let core: Vec<bool> = (0..n)
            .map(|i| (0..n).filter(|&j| d.get(i, j) <= eps).count() >= min_pts)
            .collect();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let root = find(parent, parent[i]);
                parent[i] = root;
            }
            parent[i]
        }
        for i in 0..n {
            for j in 0..n {
                if core[i] && core[j] && d.get(i, j) <= eps {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut cluster_of_root = std::collections::BTreeMap::new();
        let mut assignment = vec![None; n];
        for i in 0..n {
            if core[i] {
                let root = find(&mut parent, i);
                let next = cluster_of_root.len();
                let c = *cluster_of_root.entry(root).or_insert(next);
                assignment[i] = Some(c);
            }
        }
        for i in 0..n {
            if core[i] {
                continue;
            }
            let best = (0..n)
                .filter(|&j| core[j] && d.get(i, j) <= eps)
                .min_by(|&a, &b| d.get(i, a).partial_cmp(&d.get(i, b)).unwrap().then(a.cmp(&b)));
            if let Some(j) = best {
                assignment[i] = assignment[j];
            }
        }
        assignment
    }

    #[test]
    fn dbscan_matches_the_density_reachability_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let n = rng.gen_range(5..60);
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let d = pairwise_euclidean(&matrix_from_points(&points));
            let eps = rng.gen_range(0.05..0.6);
            let min_pts = rng.gen_range(1..5);
            let got = dbscan(&d, eps, min_pts).unwrap();
            let want = dbscan_oracle(&d, eps, min_pts);
            assert_eq!(got.assignment, want, "trial {trial} eps {eps} min_pts {min_pts}");
        }
    }

    fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
        let n = a.len();
        for i in 0..n {
            if a[i].is_some() != b[i].is_some() {
                return false;
            }
            for j in i + 1..n {
                let eq_a = a[i].is_some() && a[i] == a[j];
                let eq_b = b[i].is_some() && b[i] == b[j];
                if eq_a != eq_b {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn dbscan_partition_is_invariant_to_input_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let n = 40;
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| points[i].clone()).collect();
            let d0 = pairwise_euclidean(&matrix_from_points(&points));
            let d1 = pairwise_euclidean(&matrix_from_points(&permuted));
            let r0 = dbscan(&d0, 0.25, 3).unwrap();
            let r1 = dbscan(&d1, 0.25, 3).unwrap();
            // Map the permuted result back to original indexing before comparing.
            let mut back = vec![None; n];
            for (new_idx, &orig) in perm.iter().enumerate() {
                back[orig] = r1.assignment[new_idx];
            }
            assert!(same_partition(&r0.assignment, &back));
        }
    }

    #[test]
    fn mine_labels_equals_its_composed_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let points: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let features = matrix_from_points(&points);
        let params = MiningParams::default();
        let outcome = mine_labels(&features, &params).unwrap();

        let k1 = params.effective_k1(200);
        assert_eq!(outcome.k1, k1);
        let euclid = pairwise_euclidean(&features);
        assert_eq!(euclid.kind(), DistanceKind::Euclidean);
        let jaccard = k_reciprocal_jaccard(&euclid, k1).unwrap();
        assert_eq!(jaccard.kind(), DistanceKind::Jaccard);
        let eps = percentile_eps(&jaccard, params.eps_percentile).unwrap();
        assert_eq!(outcome.eps, eps);
        let clusters = dbscan(&jaccard, eps, params.min_pts).unwrap();
        let labeling = assign_outliers(&clusters, &jaccard).unwrap();
        assert_eq!(outcome.labeling, labeling);
    }

    #[test]
    fn mine_labels_handles_the_single_sample_case() {
        let features = matrix_from_points(&[vec![1.0, 2.0]]);
        let outcome = mine_labels(&features, &MiningParams::default()).unwrap();
        assert_eq!(outcome.labeling.labels, vec![0]);
        assert_eq!(outcome.labeling.n_clusters, 1);
        assert!(mine_labels(
            &FeatureMatrix::from_rows(vec![]),
            &MiningParams::default()
        )
        .is_err());
    }

    #[test]
    fn percentile_eps_applies_the_positive_floor() {
        // All distances zero: the percentile itself is 0 and must be floored.
        let d = pairwise_euclidean(&line_points(&[2.0; 5]));
        assert_eq!(percentile_eps(&d, 1.6).unwrap(), 1e-12);
        // Hand check on distinct values: upper triangle of {0,1,3} is {1,2,3}.
        let d = pairwise_euclidean(&line_points(&[0.0, 1.0, 3.0]));
        assert_eq!(percentile_eps(&d, 0.0).unwrap(), 1.0);
        assert_eq!(percentile_eps(&d, 50.0).unwrap(), 2.0);
        assert_eq!(percentile_eps(&d, 100.0).unwrap(), 3.0);
    }

    proptest::proptest! {
        #[test]
        fn jaccard_distances_are_symmetric_unit_interval(
            seed in 0u64..200,
            n in 4usize..20,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let d = pairwise_euclidean(&matrix_from_points(&points));
            let k1 = 1 + (seed as usize) % (n - 1);
            let j = k_reciprocal_jaccard(&d, k1).unwrap();
            for a in 0..n {
                proptest::prop_assert_eq!(j.get(a, a), 0.0);
                for b in 0..n {
                    proptest::prop_assert!(j.get(a, b) >= 0.0 && j.get(a, b) <= 1.0);
                    proptest::prop_assert_eq!(j.get(a, b), j.get(b, a));
                }
            }
        }
    }
}
