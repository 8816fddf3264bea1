//! Evaluation: retrieval quality (mAP and CMC), cluster agreement (ARI and NMI), and
//! the camera-invariance gap between intra-camera and inter-camera positive pairs.

use crate::encoder::FeatureMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("feature matrix has {n} rows but {got} labels were supplied")]
    LengthMismatch { n: usize, got: usize },
    #[error("query and gallery feature dimensions differ ({query} vs {gallery})")]
    DimMismatch { query: usize, gallery: usize },
    #[error("evaluation requires a non-empty {0} set")]
    Empty(&'static str),
    #[error("no query has a cross-camera match in the gallery")]
    NoValidQueries,
}

/// Features with person and camera labels, the unit every evaluator consumes.
#[derive(Clone, Debug)]
pub struct LabeledFeatures {
    features: FeatureMatrix,
    person_ids: Vec<u32>,
    camera_ids: Vec<u32>,
}

impl LabeledFeatures {
    pub fn new(
        features: FeatureMatrix,
        person_ids: Vec<u32>,
        camera_ids: Vec<u32>,
    ) -> Result<Self, EvalError> {
        if person_ids.len() != features.n() {
            return Err(EvalError::LengthMismatch {
                n: features.n(),
                got: person_ids.len(),
            });
        }
        if camera_ids.len() != features.n() {
            return Err(EvalError::LengthMismatch {
                n: features.n(),
                got: camera_ids.len(),
            });
        }
        Ok(LabeledFeatures {
            features,
            person_ids,
            camera_ids,
        })
    }

    pub fn n(&self) -> usize {
        self.features.n()
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn person_id(&self, i: usize) -> u32 {
        self.person_ids[i]
    }

    pub fn camera_id(&self, i: usize) -> u32 {
        self.camera_ids[i]
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ── Retrieval ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcPoint {
    pub rank: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map: f64,
    pub cmc: Vec<CmcPoint>,
    pub n_queries: usize,
    /// Queries that had at least one cross-camera positive and entered the averages.
    pub n_queries_used: usize,
}

/// Mean average precision and CMC at the requested ranks. Gallery entries sharing
/// both person and camera with the query are excluded from that query's ranking;
/// queries left without any positive are skipped. Ranking ties are broken by the
/// gallery index.
pub fn cmc_map(
    query: &LabeledFeatures,
    gallery: &LabeledFeatures,
    ranks: &[usize],
) -> Result<RetrievalReport, EvalError> {
    if query.n() == 0 {
        return Err(EvalError::Empty("query"));
    }
    if gallery.n() == 0 {
        return Err(EvalError::Empty("gallery"));
    }
    if query.features.dim() != gallery.features.dim() {
        return Err(EvalError::DimMismatch {
            query: query.features.dim(),
            gallery: gallery.features.dim(),
        });
    }
    assert!(!ranks.is_empty(), "at least one CMC rank is required");

    let mut ap_sum = 0.0;
    let mut cmc_hits = vec![0usize; ranks.len()];
    let mut used = 0usize;
    for q in 0..query.n() {
        let candidates: Vec<usize> = (0..gallery.n())
            .filter(|&g| {
                !(gallery.person_ids[g] == query.person_ids[q]
                    && gallery.camera_ids[g] == query.camera_ids[q])
            })
            .collect();
        if !candidates
            .iter()
            .any(|&g| gallery.person_ids[g] == query.person_ids[q])
        {
            continue;
        }
        used += 1;
        let qf = query.features.row(q);
        let mut order = candidates;
        order.sort_by(|&a, &b| {
            euclidean(qf, gallery.features.row(a))
                .partial_cmp(&euclidean(qf, gallery.features.row(b)))
                .expect("distances must not be NaN")
                .then(a.cmp(&b))
        });
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (pos, &g) in order.iter().enumerate() {
            if gallery.person_ids[g] == query.person_ids[q] {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                first_hit.get_or_insert(pos);
            }
        }
        ap_sum += precision_sum / hits as f64;
        let first = first_hit.expect("query with a positive has a first hit");
        for (r, &rank) in ranks.iter().enumerate() {
            if first < rank {
                cmc_hits[r] += 1;
            }
        }
    }
    if used == 0 {
        return Err(EvalError::NoValidQueries);
    }
    Ok(RetrievalReport {
        map: ap_sum / used as f64,
        cmc: ranks
            .iter()
            .zip(&cmc_hits)
            .map(|(&rank, &hits)| CmcPoint {
                rank,
                accuracy: hits as f64 / used as f64,
            })
            .collect(),
        n_queries: query.n(),
        n_queries_used: used,
    })
}

// ── Cluster agreement ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAgreement {
    pub ari: f64,
    pub nmi: f64,
}

fn comb2(n: usize) -> f64 {
    n as f64 * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index and normalized mutual information between two labelings of
/// the same samples. Degenerate cases: a single sample agrees with anything (both
/// scores 1); if exactly one side has zero entropy NMI is 0; if the ARI adjustment
/// denominator vanishes the score is 1 when the raw agreement also matches the
/// expectation and 0 otherwise.
pub fn clustering_quality(a: &[usize], b: &[usize]) -> Result<ClusterAgreement, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            n: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(EvalError::Empty("labeling"));
    }
    let n = a.len();
    if n == 1 {
        return Ok(ClusterAgreement { ari: 1.0, nmi: 1.0 });
    }
    let mut contingency: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *contingency.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }

    let sum_cells: f64 = contingency.values().map(|&c| comb2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| comb2(c)).sum();
    let total = comb2(n);
    let expected = sum_rows * sum_cols / total;
    let num = sum_cells - expected;
    let denom = 0.5 * (sum_rows + sum_cols) - expected;
    let ari = if denom == 0.0 {
        if num == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        num / denom
    };

    let nf = n as f64;
    let entropy = |counts: &BTreeMap<usize, usize>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let h_a = entropy(&rows);
    let h_b = entropy(&cols);
    let nmi = if h_a == 0.0 && h_b == 0.0 {
        1.0
    } else if h_a == 0.0 || h_b == 0.0 {
        0.0
    } else {
        let mut mi = 0.0;
        for (&(x, y), &c) in &contingency {
            let p = c as f64 / nf;
            mi += p * (nf * c as f64 / (rows[&x] as f64 * cols[&y] as f64)).ln();
        }
        mi / (h_a * h_b).sqrt()
    };
    Ok(ClusterAgreement { ari, nmi })
}

// ── Distance gap ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapOptions {
    /// Per-class cap on the number of pairs entering the statistics.
    pub max_pairs: usize,
    pub n_bins: usize,
    /// Seed for the pair subsample drawn when a class exceeds `max_pairs`.
    pub seed: u64,
}

impl Default for GapOptions {
    fn default() -> Self {
        GapOptions {
            max_pairs: 50_000,
            n_bins: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    /// `n_bins + 1` ascending edges spanning `[0, observed max]`.
    pub edges: Vec<f64>,
    pub intra: Vec<usize>,
    pub inter: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceGapReport {
    /// Mean distance of same-person pairs seen by the same camera.
    pub intra_mean: Option<f64>,
    /// Mean distance of same-person pairs seen by different cameras.
    pub inter_mean: Option<f64>,
    /// `inter_mean - intra_mean`; camera shift pushes this up, camera-invariant
    /// features pull it toward zero.
    pub gap: Option<f64>,
    pub n_intra: usize,
    pub n_inter: usize,
    pub histogram: DistanceHistogram,
}

/// Distance statistics over positive (same-person) pairs, split into intra-camera
/// and inter-camera populations, with a shared histogram. Pairs are enumerated in
/// canonical `i < j` order; populations larger than `max_pairs` are subsampled with
/// the seeded generator, so equal inputs and options give byte-equal reports.
pub fn distance_gap(
    set: &LabeledFeatures,
    opts: &GapOptions,
) -> Result<DistanceGapReport, EvalError> {
    if set.n() == 0 {
        return Err(EvalError::Empty("evaluation"));
    }
    assert!(opts.n_bins > 0, "histogram needs at least one bin");
    let mut intra_pairs: Vec<(u32, u32)> = Vec::new();
    let mut inter_pairs: Vec<(u32, u32)> = Vec::new();
    for i in 0..set.n() {
        for j in i + 1..set.n() {
            if set.person_ids[i] != set.person_ids[j] {
                continue;
            }
            if set.camera_ids[i] == set.camera_ids[j] {
                intra_pairs.push((i as u32, j as u32));
            } else {
                inter_pairs.push((i as u32, j as u32));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut subsample = |pairs: &mut Vec<(u32, u32)>| {
        if pairs.len() > opts.max_pairs {
            let mut keep = rand::seq::index::sample(&mut rng, pairs.len(), opts.max_pairs).into_vec();
            keep.sort_unstable();
            *pairs = keep.into_iter().map(|k| pairs[k]).collect();
        }
    };
    subsample(&mut intra_pairs);
    subsample(&mut inter_pairs);

    let distances = |pairs: &[(u32, u32)]| -> Vec<f64> {
        pairs
            .iter()
            .map(|&(i, j)| euclidean(set.features.row(i as usize), set.features.row(j as usize)))
            .collect()
    };
    let intra = distances(&intra_pairs);
    let inter = distances(&inter_pairs);

    let mean = |v: &[f64]| -> Option<f64> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let intra_mean = mean(&intra);
    let inter_mean = mean(&inter);
    let gap = match (intra_mean, inter_mean) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };

    let max = intra
        .iter()
        .chain(&inter)
        .fold(0.0f64, |m, &v| m.max(v))
        .max(1e-12);
    let edges: Vec<f64> = (0..=opts.n_bins)
        .map(|k| max * k as f64 / opts.n_bins as f64)
        .collect();
    let bin_of = |v: f64| -> usize {
        ((v / max * opts.n_bins as f64) as usize).min(opts.n_bins - 1)
    };
    let mut intra_counts = vec![0usize; opts.n_bins];
    let mut inter_counts = vec![0usize; opts.n_bins];
    for &v in &intra {
        intra_counts[bin_of(v)] += 1;
    }
    for &v in &inter {
        inter_counts[bin_of(v)] += 1;
    }

    Ok(DistanceGapReport {
        intra_mean,
        inter_mean,
        gap,
        n_intra: intra.len(),
        n_inter: inter.len(),
        histogram: DistanceHistogram {
            edges,
            intra: intra_counts,
            inter: inter_counts,
        },
    })
}
