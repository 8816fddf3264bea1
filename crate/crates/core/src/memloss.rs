//! Feature memory, cluster centroids, and the two memory-based losses.
//!
//! The memory keeps one L2-normalized slot per training sample and is refreshed with
//! an exponential moving average. Centroids are normalized cluster means of memory
//! slots. Both losses compare a feature against all centroids through a temperature
//! softmax: the forward loss is cross entropy toward the pseudo label, the reverse
//! loss scores smoothed targets under the predicted distribution and its per-sample
//! sum over candidate labels is a constant independent of the feature, which is what
//! makes it tolerant to pseudo-label noise.

use crate::autodiff::{AdError, Scalar, Tape, Var};
use crate::clustering::PseudoLabeling;
use crate::encoder::FeatureMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("feature has {got} dimensions, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("momentum must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("class {y} is out of range for {n_c} classes")]
    InvalidClass { y: usize, n_c: usize },
    #[error("row {i} is out of range for {n} memory slots")]
    RowIndex { i: usize, n: usize },
    #[error("vector has zero norm and cannot be normalized")]
    ZeroVector,
    #[error("cluster {cluster} has no members")]
    EmptyCluster { cluster: usize },
    #[error("label {label} is out of range for {n_clusters} clusters")]
    LabelRange { label: usize, n_clusters: usize },
    #[error("at least one loss weight must be nonzero")]
    NoActiveLoss,
}

impl From<LossError> for AdError {
    fn from(e: LossError) -> Self {
        AdError::Build(e.to_string())
    }
}

fn normalized(v: &[f64]) -> Result<Vec<f64>, LossError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(LossError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

// ── Feature memory ──────────────────────────────────────────────────────────

/// Per-sample memory of L2-normalized features, refreshed in place with momentum
/// `alpha`: `w <- normalize(alpha * w + (1 - alpha) * f)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMemory {
    data: Vec<f64>,
    n: usize,
    d: usize,
    alpha: f64,
}

impl FeatureMemory {
    pub fn from_features(features: &FeatureMatrix, alpha: f64) -> Result<Self, LossError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(LossError::InvalidAlpha(alpha));
        }
        let mut data = Vec::with_capacity(features.n() * features.dim());
        for row in features.rows() {
            data.extend(normalized(row)?);
        }
        Ok(FeatureMemory {
            data,
            n: features.n(),
            d: features.dim(),
            alpha,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Momentum update of slot `i` with the fresh feature `f`.
    pub fn update(&mut self, i: usize, f: &[f64]) -> Result<(), LossError> {
        if i >= self.n {
            return Err(LossError::RowIndex { i, n: self.n });
        }
        if f.len() != self.d {
            return Err(LossError::DimMismatch {
                expected: self.d,
                got: f.len(),
            });
        }
        let slot = i * self.d..(i + 1) * self.d;
        let blend: Vec<f64> = self.data[slot.clone()]
            .iter()
            .zip(f)
            .map(|(w, x)| self.alpha * w + (1.0 - self.alpha) * x)
            .collect();
        self.data[slot].copy_from_slice(&normalized(&blend)?);
        Ok(())
    }

    /// Replaces every slot with the normalized rows of `features`.
    pub fn refill(&mut self, features: &FeatureMatrix) -> Result<(), LossError> {
        if features.n() != self.n || features.dim() != self.d {
            return Err(LossError::DimMismatch {
                expected: self.n * self.d,
                got: features.n() * features.dim(),
            });
        }
        let mut data = Vec::with_capacity(self.n * self.d);
        for row in features.rows() {
            data.extend(normalized(row)?);
        }
        self.data = data;
        Ok(())
    }
}

// ── Centroids ───────────────────────────────────────────────────────────────

/// Normalized cluster centroids with member counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    data: Vec<f64>,
    counts: Vec<usize>,
    d: usize,
}

impl CentroidSet {
    pub fn new(rows: Vec<Vec<f64>>, counts: Vec<usize>) -> Result<Self, LossError> {
        assert_eq!(rows.len(), counts.len(), "one count per centroid");
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in &rows {
            if row.len() != d {
                return Err(LossError::DimMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(CentroidSet { data, counts, d })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.data[j * self.d..(j + 1) * self.d]
    }

    pub fn count(&self, j: usize) -> usize {
        self.counts[j]
    }
}

/// Normalized per-cluster means of the memory slots. With `include_outliers` false,
/// only samples the clustering marked as inliers contribute.
pub fn build_centroids(
    mem: &FeatureMemory,
    labeling: &PseudoLabeling,
    include_outliers: bool,
) -> Result<CentroidSet, LossError> {
    let n_c = labeling.n_clusters;
    let d = mem.dim();
    let mut sums = vec![0.0; n_c * d];
    let mut counts = vec![0usize; n_c];
    for i in 0..mem.n() {
        if !include_outliers && !labeling.inlier_mask[i] {
            continue;
        }
        let label = labeling.labels[i];
        if label >= n_c {
            return Err(LossError::LabelRange {
                label,
                n_clusters: n_c,
            });
        }
        counts[label] += 1;
        for (s, w) in sums[label * d..(label + 1) * d].iter_mut().zip(mem.row(i)) {
            *s += w;
        }
    }
    let mut rows = Vec::with_capacity(n_c);
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(LossError::EmptyCluster { cluster: j });
        }
        let mean: Vec<f64> = sums[j * d..(j + 1) * d]
            .iter()
            .map(|s| s / count as f64)
            .collect();
        rows.push(normalized(&mean)?);
    }
    CentroidSet::new(rows, counts)
}

// ── Losses ──────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    pub dce_weight: f64,
    pub dsce_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.05,
            dce_weight: 1.0,
            dsce_weight: 1.0,
        }
    }
}

/// Smoothed target distribution over `n_c` classes for label `y`: the true class
/// gets `e / (n_c - 1 + e)`, every other class `1 / (n_c - 1 + e)`.
pub fn soft_targets(n_c: usize, y: usize) -> Result<Vec<f64>, LossError> {
    if y >= n_c {
        return Err(LossError::InvalidClass { y, n_c });
    }
    let q = n_c as f64 - 1.0 + std::f64::consts::E;
    Ok((0..n_c)
        .map(|j| if j == y { std::f64::consts::E / q } else { 1.0 / q })
        .collect())
}

fn ln_soft_targets(n_c: usize, y: usize) -> Result<Vec<f64>, LossError> {
    if y >= n_c {
        return Err(LossError::InvalidClass { y, n_c });
    }
    let ln_q = (n_c as f64 - 1.0 + std::f64::consts::E).ln();
    Ok((0..n_c)
        .map(|j| if j == y { 1.0 - ln_q } else { -ln_q })
        .collect())
}

/// `ln sum_j exp(z_j)` with the maximum value subtracted as a detached constant.
/// The shift cancels analytically, so first and second derivatives through the tape
/// are unaffected by the detachment.
pub fn log_sum_exp<S: Scalar>(tape: &mut Tape<S>, z: &[Var]) -> Var {
    let m = z
        .iter()
        .map(|&v| tape.value(v).re())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<Var> = z
        .iter()
        .map(|&v| {
            let shifted = tape.offset(v, -m);
            tape.exp(shifted)
        })
        .collect();
    let total = tape.sum(&exps);
    let ln_total = tape.ln(total);
    tape.offset(ln_total, m)
}

fn validate_loss_inputs(
    f_len: usize,
    y: usize,
    centroids: &CentroidSet,
    tau: f64,
) -> Result<(), LossError> {
    if f_len != centroids.dim() {
        return Err(LossError::DimMismatch {
            expected: centroids.dim(),
            got: f_len,
        });
    }
    if y >= centroids.n_classes() {
        return Err(LossError::InvalidClass {
            y,
            n_c: centroids.n_classes(),
        });
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(LossError::InvalidTau(tau));
    }
    Ok(())
}

/// Temperature-scaled centroid similarities `z_j = (f . c_j) / tau`.
fn logits<S: Scalar>(tape: &mut Tape<S>, f: &[Var], centroids: &CentroidSet, tau: f64) -> Vec<Var> {
    (0..centroids.n_classes())
        .map(|j| {
            let dot = tape.dot_const(f, centroids.centroid(j));
            tape.scale(dot, 1.0 / tau)
        })
        .collect()
}

/// Forward cross entropy against the pseudo label: `lse(z) - z_y`.
pub fn dce_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    f: &[Var],
    y: usize,
    centroids: &CentroidSet,
    tau: f64,
) -> Result<Var, LossError> {
    validate_loss_inputs(f.len(), y, centroids, tau)?;
    let z = logits(tape, f, centroids, tau);
    let lse = log_sum_exp(tape, &z);
    Ok(tape.sub(lse, z[y]))
}

/// Reverse cross entropy: the predicted distribution `p = softmax(z)` scores the
/// constant smoothed targets, `-sum_j p_j ln ytilde_j`. Gradients flow through `p`
/// only.
pub fn dsce_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    f: &[Var],
    y: usize,
    centroids: &CentroidSet,
    tau: f64,
) -> Result<Var, LossError> {
    validate_loss_inputs(f.len(), y, centroids, tau)?;
    let z = logits(tape, f, centroids, tau);
    let lse = log_sum_exp(tape, &z);
    let p: Vec<Var> = z
        .iter()
        .map(|&zj| {
            let shifted = tape.sub(zj, lse);
            tape.exp(shifted)
        })
        .collect();
    let ln_targets = ln_soft_targets(centroids.n_classes(), y)?;
    let score = tape.dot_const(&p, &ln_targets);
    Ok(tape.neg(score))
}

/// Weighted sum of the two losses. Zero-weight branches are not recorded at all and
/// unit weights skip the scale node, so a single-loss configuration builds exactly
/// the tape of that loss alone.
pub fn combined_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    f: &[Var],
    y: usize,
    centroids: &CentroidSet,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let mut terms = Vec::with_capacity(2);
    if cfg.dce_weight != 0.0 {
        let dce = dce_on_tape(tape, f, y, centroids, cfg.tau)?;
        terms.push(if cfg.dce_weight == 1.0 {
            dce
        } else {
            tape.scale(dce, cfg.dce_weight)
        });
    }
    if cfg.dsce_weight != 0.0 {
        let dsce = dsce_on_tape(tape, f, y, centroids, cfg.tau)?;
        terms.push(if cfg.dsce_weight == 1.0 {
            dsce
        } else {
            tape.scale(dsce, cfg.dsce_weight)
        });
    }
    match terms.len() {
        0 => Err(LossError::NoActiveLoss),
        1 => Ok(terms[0]),
        _ => Ok(tape.add(terms[0], terms[1])),
    }
}

fn value_of(
    build: impl FnOnce(&mut Tape<f64>, &[Var]) -> Result<Var, LossError>,
    f: &[f64],
) -> Result<f64, LossError> {
    let mut tape: Tape<f64> = Tape::new();
    let fv: Vec<Var> = f.iter().map(|&v| tape.constant(v)).collect();
    let out = build(&mut tape, &fv)?;
    Ok(tape.value(out))
}

pub fn dce_value(f: &[f64], y: usize, centroids: &CentroidSet, tau: f64) -> Result<f64, LossError> {
    value_of(|tape, fv| dce_on_tape(tape, fv, y, centroids, tau), f)
}

pub fn dsce_value(
    f: &[f64],
    y: usize,
    centroids: &CentroidSet,
    tau: f64,
) -> Result<f64, LossError> {
    value_of(|tape, fv| dsce_on_tape(tape, fv, y, centroids, tau), f)
}

pub fn combined_value(
    f: &[f64],
    y: usize,
    centroids: &CentroidSet,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    value_of(|tape, fv| combined_on_tape(tape, fv, y, centroids, cfg), f)
}

/// Result of summing the reverse loss over every candidate label for one feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseToleranceCheck {
    pub sum: f64,
    /// Closed form of the sum: `-1 + n_c * ln(n_c - 1 + e)`.
    pub expected: f64,
}

/// Evaluates the label-sum of the reverse loss; the result is independent of `f`.
pub fn check_noise_tolerance(
    f: &[f64],
    centroids: &CentroidSet,
    tau: f64,
) -> Result<NoiseToleranceCheck, LossError> {
    let n_c = centroids.n_classes();
    let mut sum = 0.0;
    for y in 0..n_c {
        sum += dsce_value(f, y, centroids, tau)?;
    }
    let expected = -1.0 + n_c as f64 * (n_c as f64 - 1.0 + std::f64::consts::E).ln();
    Ok(NoiseToleranceCheck { sum, expected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{self, ParamLayout, ParamVector, TapeLoss};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    /// `n_c` copies of one centroid: every logit is identical, so p is uniform.
    fn equal_centroids(n_c: usize) -> CentroidSet {
        CentroidSet::new(vec![vec![1.0, 0.0]; n_c], vec![1; n_c]).unwrap()
    }

    fn axis_centroids() -> CentroidSet {
        CentroidSet::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
            vec![1, 1, 1],
        )
        .unwrap()
    }

    #[test]
    fn soft_targets_match_the_closed_form() {
        let t = soft_targets(3, 0).unwrap();
        close(t[0], 0.5761168847658291, 1e-15);
        close(t[1], 0.21194155761708547, 1e-15);
        close(t[2], 0.21194155761708547, 1e-15);
        close(t.iter().sum::<f64>(), 1.0, 1e-12);
        assert!(soft_targets(3, 3).is_err());
    }

    #[test]
    fn uniform_prediction_gives_log_n_for_the_forward_loss() {
        let f = vec![0.3, 0.7];
        close(
            dce_value(&f, 1, &equal_centroids(4), 0.05).unwrap(),
            1.3862943611198906,
            1e-12,
        );
    }

    #[test]
    fn forward_loss_matches_a_scalar_softmax_oracle() {
        let c = axis_centroids();
        let f = vec![0.6, 0.8];
        let tau = 0.25;
        for y in 0..3 {
            // Oracle: plain softmax cross entropy computed with scalar arithmetic.
            let z: Vec<f64> = (0..3)
                .map(|j| {
                    c.centroid(j).iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() / tau
                })
                .collect();
            let total: f64 = z.iter().map(|v| v.exp()).sum();
            let expected = -(z[y].exp() / total).ln();
            close(dce_value(&f, y, &c, tau).unwrap(), expected, 1e-12);
        }
    }

    #[test]
    fn forward_loss_vanishes_when_the_prediction_saturates() {
        // f sits on centroid 0 and far from the others; tau 0.01 saturates p.
        let loss = dce_value(&[1.0, 0.0], 0, &axis_centroids(), 0.01).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn reverse_loss_with_uniform_prediction() {
        close(
            dsce_value(&[0.0, 1.0], 0, &equal_centroids(3), 0.05).unwrap(),
            1.2181113805987174,
            1e-12,
        );
    }

    #[test]
    fn reverse_loss_with_saturated_prediction() {
        close(
            dsce_value(&[1.0, 0.0], 0, &axis_centroids(), 0.01).unwrap(),
            0.5514447139320509,
            1e-12,
        );
    }

    #[test]
    fn combined_loss_with_uniform_prediction() {
        close(
            combined_value(&[0.5, 0.5], 0, &equal_centroids(3), &LossConfig::default()).unwrap(),
            2.3167236692668274,
            1e-12,
        );
    }

    #[test]
    fn label_sum_of_the_reverse_loss_is_the_closed_form_constant() {
        let check = check_noise_tolerance(&[0.6, 0.8], &axis_centroids(), 0.05).unwrap();
        close(check.expected, 3.654334141796152, 1e-12);
        close(check.sum, check.expected, 1e-12);
        let two = CentroidSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1, 1]).unwrap();
        let check = check_noise_tolerance(&[0.0, -1.0], &two, 0.5).unwrap();
        close(check.expected, 1.6265233750364456, 1e-12);
        close(check.sum, check.expected, 1e-12);
    }

    #[test]
    fn label_sum_of_the_forward_loss_depends_on_the_feature() {
        // The forward loss has no such constant: two features give different sums.
        let c = axis_centroids();
        let sum_at = |f: &[f64]| -> f64 {
            (0..3).map(|y| dce_value(f, y, &c, 0.05).unwrap()).sum()
        };
        let a = sum_at(&[1.0, 0.0]);
        let b = sum_at(&[0.6, 0.8]);
        assert!((a - b).abs() > 1.0, "sums {a} and {b} should differ");
    }

    proptest::proptest! {
        #[test]
        fn label_sum_is_constant_for_random_features_and_centroids(
            seed in 0u64..500,
            n_c in 2usize..50,
            tau in 0.01f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalized(&v).unwrap()
            };
            let rows: Vec<Vec<f64>> = (0..n_c).map(|_| unit(&mut rng)).collect();
            let centroids = CentroidSet::new(rows, vec![1; n_c]).unwrap();
            let f = unit(&mut rng);
            let check = check_noise_tolerance(&f, &centroids, tau).unwrap();
            let rel = (check.sum - check.expected).abs()
                / check.sum.abs().max(check.expected.abs()).max(1e-3);
            proptest::prop_assert!(rel <= 1e-9, "sum {} expected {}", check.sum, check.expected);
            // Lower bounds: dce is nonnegative, dsce at least ln(n_c-1+e) - 1.
            let dsce_floor = (n_c as f64 - 1.0 + std::f64::consts::E).ln() - 1.0;
            for y in 0..n_c {
                let dce = dce_value(&f, y, &centroids, tau).unwrap();
                let dsce = dsce_value(&f, y, &centroids, tau).unwrap();
                proptest::prop_assert!(dce >= -1e-12 && dce.is_finite());
                proptest::prop_assert!(dsce >= dsce_floor - 1e-12 && dsce.is_finite());
            }
        }
    }

    /// Losses as a function of the feature vector itself, for gradient checks.
    struct FeatureLoss {
        y: usize,
        centroids: CentroidSet,
        cfg: LossConfig,
    }

    impl TapeLoss for FeatureLoss {
        fn build<S: Scalar>(&self, tape: &mut Tape<S>, theta: &[Var]) -> Result<Var, AdError> {
            Ok(combined_on_tape(tape, theta, self.y, &self.centroids, &self.cfg)?)
        }
    }

    fn feature_param(f: Vec<f64>) -> ParamVector {
        let n = f.len();
        ParamVector::new(ParamLayout::new(vec![("f".to_string(), n)]), f).unwrap()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let centroids = axis_centroids();
        let configs = [
            LossConfig { tau: 0.05, dce_weight: 1.0, dsce_weight: 0.0 },
            LossConfig { tau: 0.05, dce_weight: 0.0, dsce_weight: 1.0 },
            LossConfig { tau: 0.2, dce_weight: 1.0, dsce_weight: 1.0 },
        ];
        for cfg in configs {
            let loss = FeatureLoss { y: 1, centroids: centroids.clone(), cfg };
            // Close to the decision boundary so no softmax entry saturates and the
            // finite-difference oracle keeps resolution.
            let f = vec![0.1, -0.15];
            let r = autodiff::grad(&loss, &feature_param(f.clone())).unwrap();
            let h = 1e-6;
            for i in 0..f.len() {
                let mut up = f.clone();
                up[i] += h;
                let mut down = f.clone();
                down[i] -= h;
                let fd = (combined_value(&up, 1, &centroids, &cfg).unwrap()
                    - combined_value(&down, 1, &centroids, &cfg).unwrap())
                    / (2.0 * h);
                let g = r.gradient.values()[i];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-7, "cfg {cfg:?} entry {i}: analytic {g} vs fd {fd}");
            }
        }
    }

    #[test]
    fn single_loss_configurations_build_the_plain_loss_tape() {
        let centroids = axis_centroids();
        let f = vec![0.28, -0.96];
        let grad_of = |cfg: LossConfig| {
            let loss = FeatureLoss { y: 2, centroids: centroids.clone(), cfg };
            autodiff::grad(&loss, &feature_param(f.clone())).unwrap()
        };
        let dce_only = grad_of(LossConfig { tau: 0.05, dce_weight: 1.0, dsce_weight: 0.0 });
        let dsce_only = grad_of(LossConfig { tau: 0.05, dce_weight: 0.0, dsce_weight: 1.0 });

        struct Plain {
            dsce: bool,
            centroids: CentroidSet,
        }
        impl TapeLoss for Plain {
            fn build<S: Scalar>(&self, tape: &mut Tape<S>, theta: &[Var]) -> Result<Var, AdError> {
                Ok(if self.dsce {
                    dsce_on_tape(tape, theta, 2, &self.centroids, 0.05)?
                } else {
                    dce_on_tape(tape, theta, 2, &self.centroids, 0.05)?
                })
            }
        }
        for (combined, dsce) in [(dce_only, false), (dsce_only, true)] {
            let plain = autodiff::grad(
                &Plain { dsce, centroids: centroids.clone() },
                &feature_param(f.clone()),
            )
            .unwrap();
            assert_eq!(combined.loss.to_bits(), plain.loss.to_bits());
            for (a, b) in combined
                .gradient
                .values()
                .iter()
                .zip(plain.gradient.values())
            {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let bad = LossConfig { tau: 0.05, dce_weight: 0.0, dsce_weight: 0.0 };
        assert!(matches!(
            combined_value(&f, 0, &centroids, &bad),
            Err(LossError::NoActiveLoss)
        ));
    }

    #[test]
    fn loss_input_validation() {
        let c = axis_centroids();
        assert!(matches!(
            dce_value(&[1.0, 0.0, 0.0], 0, &c, 0.05),
            Err(LossError::DimMismatch { expected: 2, got: 3 })
        ));
        assert!(matches!(
            dce_value(&[1.0, 0.0], 3, &c, 0.05),
            Err(LossError::InvalidClass { y: 3, n_c: 3 })
        ));
        assert!(matches!(
            dce_value(&[1.0, 0.0], 0, &c, 0.0),
            Err(LossError::InvalidTau(_))
        ));
    }

    #[test]
    fn memory_update_blends_and_renormalizes() {
        let features = FeatureMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut mem = FeatureMemory::from_features(&features, 0.2).unwrap();
        mem.update(0, &[0.0, 1.0]).unwrap();
        close(mem.row(0)[0], 0.24253562503633294, 1e-12);
        close(mem.row(0)[1], 0.9701425001453318, 1e-12);
    }

    #[test]
    fn memory_update_edge_momenta() {
        let features = FeatureMatrix::from_rows(vec![vec![1.0, 0.0]]);
        let mut keep = FeatureMemory::from_features(&features, 1.0).unwrap();
        keep.update(0, &[0.0, 1.0]).unwrap();
        assert_eq!(keep.row(0), &[1.0, 0.0]);

        let mut replace = FeatureMemory::from_features(&features, 0.0).unwrap();
        replace.update(0, &[0.0, 2.0]).unwrap();
        assert_eq!(replace.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn memory_update_leaves_other_slots_untouched() {
        let features = FeatureMatrix::from_rows(vec![
            vec![1.0, 0.0],
            vec![0.6, 0.8],
            vec![0.0, -1.0],
        ]);
        let mut mem = FeatureMemory::from_features(&features, 0.2).unwrap();
        let before: Vec<f64> = mem.row(2).to_vec();
        mem.update(1, &[1.0, 0.0]).unwrap();
        for (a, b) in mem.row(2).iter().zip(&before) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn memory_rejects_bad_updates() {
        let features = FeatureMatrix::from_rows(vec![vec![1.0, 0.0]]);
        let mut mem = FeatureMemory::from_features(&features, 0.2).unwrap();
        assert!(matches!(
            mem.update(1, &[1.0, 0.0]),
            Err(LossError::RowIndex { i: 1, n: 1 })
        ));
        assert!(matches!(
            mem.update(0, &[1.0]),
            Err(LossError::DimMismatch { .. })
        ));
        // alpha 1 keeps w, so a zero blend needs alpha 0 and a zero feature.
        let mut zeroable = FeatureMemory::from_features(&features, 0.0).unwrap();
        assert!(matches!(
            zeroable.update(0, &[0.0, 0.0]),
            Err(LossError::ZeroVector)
        ));
        assert!(FeatureMemory::from_features(&features, 1.5).is_err());
    }

    #[test]
    fn memory_refill_replaces_every_slot() {
        let features = FeatureMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut mem = FeatureMemory::from_features(&features, 0.2).unwrap();
        let fresh = FeatureMatrix::from_rows(vec![vec![0.0, 2.0], vec![3.0, 0.0]]);
        mem.refill(&fresh).unwrap();
        assert_eq!(mem.row(0), &[0.0, 1.0]);
        assert_eq!(mem.row(1), &[1.0, 0.0]);
        let wrong = FeatureMatrix::from_rows(vec![vec![1.0, 0.0]]);
        assert!(mem.refill(&wrong).is_err());
    }

    #[test]
    fn memory_serde_round_trip_is_exact() {
        let features = FeatureMatrix::from_rows(vec![vec![0.3, -0.4], vec![0.8, 0.6]]);
        let mut mem = FeatureMemory::from_features(&features, 0.2).unwrap();
        mem.update(0, &[1.0, 1.0]).unwrap();
        let json = serde_json::to_string(&mem).unwrap();
        let back: FeatureMemory = serde_json::from_str(&json).unwrap();
        assert_eq!(mem, back);
    }

    #[test]
    fn centroids_are_normalized_cluster_means() {
        let features = FeatureMatrix::from_rows(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
        ]);
        let mem = FeatureMemory::from_features(&features, 0.2).unwrap();
        let labeling = PseudoLabeling {
            labels: vec![0, 0, 1],
            inlier_mask: vec![true, true, true],
            n_clusters: 2,
        };
        let c = build_centroids(&mem, &labeling, true).unwrap();
        assert_eq!(c.n_classes(), 2);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        close(c.centroid(0)[0], s, 1e-12);
        close(c.centroid(0)[1], s, 1e-12);
        assert_eq!(c.centroid(1), &[-1.0, 0.0]);
        assert_eq!((c.count(0), c.count(1)), (2, 1));
    }

    #[test]
    fn excluding_outliers_changes_the_centroid() {
        let features = FeatureMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mem = FeatureMemory::from_features(&features, 0.2).unwrap();
        let labeling = PseudoLabeling {
            labels: vec![0, 0],
            inlier_mask: vec![true, false],
            n_clusters: 1,
        };
        let with = build_centroids(&mem, &labeling, true).unwrap();
        let without = build_centroids(&mem, &labeling, false).unwrap();
        assert_eq!(without.centroid(0), &[1.0, 0.0]);
        assert!(with.centroid(0)[1] > 0.0);
        assert_eq!((with.count(0), without.count(0)), (2, 1));
    }

    #[test]
    fn empty_cluster_is_an_error() {
        let features = FeatureMatrix::from_rows(vec![vec![1.0, 0.0]]);
        let mem = FeatureMemory::from_features(&features, 0.2).unwrap();
        let labeling = PseudoLabeling {
            labels: vec![0],
            inlier_mask: vec![false],
            n_clusters: 1,
        };
        assert!(matches!(
            build_centroids(&mem, &labeling, false),
            Err(LossError::EmptyCluster { cluster: 0 })
        ));
    }

    #[test]
    fn centroids_match_a_group_by_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalized(&v).unwrap()
            })
            .collect();
        let labels: Vec<usize> = (0..50).map(|_| rng.gen_range(0..5)).collect();
        let mem =
            FeatureMemory::from_features(&FeatureMatrix::from_rows(rows.clone()), 0.2).unwrap();
        let labeling = PseudoLabeling {
            labels: labels.clone(),
            inlier_mask: vec![true; 50],
            n_clusters: 5,
        };
        let c = build_centroids(&mem, &labeling, true).unwrap();
        for j in 0..5 {
            let members: Vec<&Vec<f64>> = rows
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == j)
                .map(|(r, _)| r)
                .collect();
            assert_eq!(c.count(j), members.len());
            let mut mean = vec![0.0; 6];
            for m in &members {
                for (s, v) in mean.iter_mut().zip(m.iter()) {
                    *s += v / members.len() as f64;
                }
            }
            let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (got, want) in c.centroid(j).iter().zip(&mean) {
                close(*got, want / norm, 1e-12);
            }
        }
    }

    #[test]
    fn exemplar_labeling_reproduces_the_memory_rows() {
        let features = FeatureMatrix::from_rows(vec![vec![0.6, 0.8], vec![-1.0, 0.0]]);
        let mem = FeatureMemory::from_features(&features, 0.2).unwrap();
        let c = build_centroids(&mem, &PseudoLabeling::exemplar(2), true).unwrap();
        for j in 0..2 {
            for (a, b) in c.centroid(j).iter().zip(mem.row(j)) {
                close(*a, *b, 1e-12);
            }
        }
    }
}
