//! Training loop: exemplar warm-up, per-epoch pseudo-label mining, camera-based
//! meta splits, and meta-gradient steps over a shared feature memory.
//!
//! One mining epoch encodes the whole training split, mines pseudo-labels, redraws
//! the camera split, and walks paired mini-batches. Every random choice is drawn
//! from a stream keyed by `(seed, phase, epoch)`, so a run can be resumed from any
//! completed epoch and reproduce the uninterrupted run bit for bit.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::autodiff::{
    self, AdError, ParamVector, Scalar, SecondOrder, Tape, TapeLoss, Var,
};
use crate::clustering::{self, ClusterError, MiningParams, PseudoLabeling};
use crate::datagen::SynthDataset;
use crate::encoder::{self, EncoderConfig, EncoderError, FeatureMatrix};
use crate::evaluation::{self, EvalError, GapOptions, LabeledFeatures};
use crate::memloss::{self, CentroidSet, FeatureMemory, LossConfig, LossError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("training diverged at {context}: {source}")]
    Diverged { context: String, source: AdError },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("epoch callback failed: {0}")]
    Callback(String),
}

impl TrainError {
    /// True for the runtime blow-up case (non-finite loss or gradient), as opposed
    /// to config or data mistakes.
    pub fn is_divergence(&self) -> bool {
        matches!(self, TrainError::Diverged { .. })
    }

    fn at(self, epoch: usize, step: usize) -> TrainError {
        match self {
            TrainError::Diverged { context, source } => TrainError::Diverged {
                context: format!("epoch {epoch}, step {step}, {context}"),
                source,
            },
            other => other,
        }
    }
}

fn step_error(e: AdError, context: &str) -> TrainError {
    match e {
        AdError::NonFiniteLoss { .. } | AdError::NonFiniteGradient { .. } => {
            TrainError::Diverged {
                context: context.to_string(),
                source: e,
            }
        }
        other => TrainError::Ad(other),
    }
}

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    /// Meta-gradient with the exact curvature term.
    Full,
    /// Meta-gradient with the curvature term dropped.
    FirstOrder,
    /// No inner update; each step is a plain loss step on the union batch.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOpt {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate gamma, shared by the outer optimizer and the inner step.
    pub gamma: f64,
    /// Inner-step rate override; `None` reuses `gamma`.
    pub inner_gamma: Option<f64>,
    /// Requested batch size N_b; the effective size shrinks on tiny datasets.
    pub batch_size: usize,
    /// Softmax temperature tau.
    pub tau: f64,
    /// Memory momentum alpha.
    pub alpha: f64,
    /// Cameras on the meta-train side, N_mtr; `None` selects half of them.
    pub n_meta_train_cams: Option<usize>,
    /// Mining epochs (warm-up epochs are counted separately).
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub meta_mode: MetaMode,
    /// Adds the soft, noise-tolerant term to the per-sample loss.
    pub dsce_on: bool,
    /// Keeps clustering outliers in batches and centroids.
    pub outliers_on: bool,
    /// Fraction of mined labels flipped to a uniformly random other cluster
    /// each epoch, for noise-robustness experiments.
    pub label_noise_frac: f64,
    /// Epoch interval for retrieval evaluation in the history; 0 disables it.
    /// The final epoch is always evaluated when the interval is nonzero.
    pub eval_every: usize,
    pub outer_opt: OuterOpt,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 3.5e-4,
            inner_gamma: None,
            batch_size: 64,
            tau: 0.05,
            alpha: 0.2,
            n_meta_train_cams: None,
            epochs: 40,
            warmup_epochs: 5,
            meta_mode: MetaMode::Full,
            dsce_on: true,
            outliers_on: true,
            label_noise_frac: 0.0,
            eval_every: 0,
            outer_opt: OuterOpt::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `min(batch_size, |train| / 8)`, floored at one, so tiny datasets still
    /// form several batches per side.
    pub fn effective_batch_size(&self, n_train: usize) -> usize {
        self.batch_size.min((n_train / 8).max(1))
    }

    /// Configured N_mtr, defaulting to half the cameras.
    pub fn effective_n_mtr(&self, n_cameras: usize) -> usize {
        self.n_meta_train_cams
            .unwrap_or_else(|| (n_cameras / 2).max(1))
    }

    pub fn validate(&self, n_cameras: usize) -> Result<(), TrainError> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(TrainError::Config("gamma must be positive".to_string()));
        }
        if let Some(inner) = self.inner_gamma {
            if !(inner.is_finite() && inner >= 0.0) {
                return Err(TrainError::Config(
                    "inner_gamma must be non-negative".to_string(),
                ));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(TrainError::Config("tau must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::Config("alpha must lie in [0, 1]".to_string()));
        }
        if !(0.0..=1.0).contains(&self.label_noise_frac) {
            return Err(TrainError::Config(
                "label_noise_frac must lie in [0, 1]".to_string(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".to_string()));
        }
        if self.meta_mode != MetaMode::Off {
            let n_mtr = self.effective_n_mtr(n_cameras);
            if n_cameras < 2 || n_mtr < 1 || n_mtr > n_cameras - 1 {
                return Err(TrainError::Config(format!(
                    "n_mtr = {n_mtr} must lie in 1..={} for {n_cameras} cameras",
                    n_cameras.saturating_sub(1)
                )));
            }
        }
        Ok(())
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            dce_weight: 1.0,
            dsce_weight: if self.dsce_on { 1.0 } else { 0.0 },
        }
    }
}

// ── Deterministic RNG streams ───────────────────────────────────────────────

const PHASE_SPLIT: u64 = 1;
const PHASE_BATCH: u64 = 2;
const PHASE_WARMUP: u64 = 3;
const PHASE_NOISE: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one `(phase, epoch)` slot, independent of every other slot, so
/// resuming at epoch `k` replays exactly the draws the uninterrupted run made.
fn stream_rng(seed: u64, phase: u64, epoch: usize) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ splitmix64(phase ^ splitmix64(epoch as u64)));
    ChaCha8Rng::seed_from_u64(mixed)
}

// ── Meta splits and batch pairing ───────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct MetaSplit {
    pub meta_train_cams: Vec<u32>,
    pub meta_test_cams: Vec<u32>,
    pub meta_train_idx: Vec<usize>,
    pub meta_test_idx: Vec<usize>,
}

/// Draws `n_mtr` cameras uniformly for the meta-train side and routes every
/// included sample by its camera. The camera universe comes from `cameras` as a
/// whole, not just the included subset, so the draw does not depend on which
/// samples an epoch keeps.
pub fn split_by_camera(
    cameras: &[u32],
    included: &[usize],
    n_mtr: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MetaSplit, TrainError> {
    let mut universe: Vec<u32> = cameras.to_vec();
    universe.sort_unstable();
    universe.dedup();
    let n_cam = universe.len();
    if n_mtr < 1 || n_cam < 2 || n_mtr > n_cam - 1 {
        return Err(TrainError::Config(format!(
            "n_mtr = {n_mtr} must lie in 1..={} for {n_cam} cameras",
            n_cam.saturating_sub(1)
        )));
    }
    let mut chosen = index::sample(rng, n_cam, n_mtr).into_vec();
    chosen.sort_unstable();
    let train_cams: BTreeSet<u32> = chosen.iter().map(|&i| universe[i]).collect();
    let mut split = MetaSplit {
        meta_train_cams: train_cams.iter().copied().collect(),
        meta_test_cams: universe
            .iter()
            .copied()
            .filter(|c| !train_cams.contains(c))
            .collect(),
        meta_train_idx: Vec::new(),
        meta_test_idx: Vec::new(),
    };
    for &i in included {
        if train_cams.contains(&cameras[i]) {
            split.meta_train_idx.push(i);
        } else {
            split.meta_test_idx.push(i);
        }
    }
    Ok(split)
}

/// Pool that reshuffles and restarts whenever it runs dry, for cycling the
/// smaller meta side.
struct Cycler {
    pool: Vec<usize>,
    cursor: usize,
}

impl Cycler {
    fn new(items: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut pool = items.to_vec();
        pool.shuffle(rng);
        Cycler { pool, cursor: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.cursor == self.pool.len() {
                self.pool.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.pool[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Pairs mini-batches from the two meta sides. The longer side is enumerated
/// exactly once in chunks of `n_b`; the shorter side cycles (reshuffling at each
/// wrap) and matches the chunk sizes, so both losses in a step average over the
/// same count. Returns no steps when either side is empty.
pub fn paired_batches(
    meta_train: &[usize],
    meta_test: &[usize],
    n_b: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    if meta_train.is_empty() || meta_test.is_empty() {
        return Vec::new();
    }
    let longest = meta_train.len().max(meta_test.len());
    let steps = longest.div_ceil(n_b);
    let mut tr = Cycler::new(meta_train, rng);
    let mut te = Cycler::new(meta_test, rng);
    (0..steps)
        .map(|s| {
            let k = n_b.min(longest - s * n_b);
            let b_tr = tr.take(k, rng);
            let b_te = te.take(k, rng);
            (b_tr, b_te)
        })
        .collect()
}

// ── Outer optimizer ─────────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state carried across steps and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OuterState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u32 },
}

impl OuterState {
    pub fn new(opt: OuterOpt, n_params: usize) -> Self {
        match opt {
            OuterOpt::Sgd => OuterState::Sgd,
            OuterOpt::Adam => OuterState::Adam {
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
        }
    }

    pub fn step(
        &mut self,
        theta: &mut ParamVector,
        gradient: &ParamVector,
        rate: f64,
    ) -> Result<(), TrainError> {
        match self {
            OuterState::Sgd => {
                theta.add_scaled(gradient, -rate)?;
            }
            OuterState::Adam { m, v, t } => {
                if m.len() != theta.len() {
                    return Err(TrainError::Config(format!(
                        "optimizer state sized for {} parameters, model has {}",
                        m.len(),
                        theta.len()
                    )));
                }
                *t += 1;
                let bias1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let bias2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                let values = theta.values_mut();
                for i in 0..values.len() {
                    let g = gradient.values()[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    values[i] -= rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}

// ── Batch loss over the encoder and memory centroids ────────────────────────

struct BatchLoss<'a> {
    enc: &'a EncoderConfig,
    xs: Vec<&'a [f64]>,
    ys: Vec<usize>,
    centroids: &'a CentroidSet,
    loss: LossConfig,
}

impl BatchLoss<'_> {
    fn gather<'a>(
        ds: &'a SynthDataset,
        enc: &'a EncoderConfig,
        labels: &[usize],
        batch: &[usize],
        centroids: &'a CentroidSet,
        loss: LossConfig,
    ) -> BatchLoss<'a> {
        BatchLoss {
            enc,
            xs: batch.iter().map(|&i| ds.train[i].x.as_slice()).collect(),
            ys: batch.iter().map(|&i| labels[i]).collect(),
            centroids,
            loss,
        }
    }
}

impl TapeLoss for BatchLoss<'_> {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, theta: &[Var]) -> Result<Var, AdError> {
        if self.xs.is_empty() {
            return Err(AdError::Build("batch loss over an empty batch".to_string()));
        }
        let mut terms = Vec::with_capacity(self.xs.len());
        for (x, &y) in self.xs.iter().zip(&self.ys) {
            let f = encoder::forward_on_tape(self.enc, tape, theta, x)?;
            terms.push(memloss::combined_on_tape(tape, &f, y, self.centroids, &self.loss)?);
        }
        let total = tape.sum(&terms);
        Ok(tape.scale(total, 1.0 / self.xs.len() as f64))
    }
}

// ── Training state ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    /// Inter-camera minus intra-camera mean positive-pair distance on the test
    /// split; `None` when a pair kind is absent.
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Cluster count the mining produced, before any label noise.
    pub n_clusters: usize,
    pub inlier_fraction: f64,
    /// Mining found no inliers and the epoch ran on exemplar labels.
    pub exemplar_fallback: bool,
    /// A meta side was empty (or unsplittable) and the epoch ran plain steps
    /// over all included samples.
    pub plain_fallback: bool,
    pub steps: usize,
    /// Mean meta-train loss; for plain steps both means carry the union loss.
    pub mean_loss_mtr: f64,
    pub mean_loss_mte: f64,
    /// Agreement of the mined labels with ground-truth identities.
    pub mining_ari: f64,
    pub mining_nmi: f64,
    pub eval: Option<EvalSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub theta: ParamVector,
    pub memory: FeatureMemory,
    /// Completed mining epochs; also the next epoch to run.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub outer: OuterState,
}

// ── Warm-up ─────────────────────────────────────────────────────────────────

/// Initializes the encoder and memory, then trains for `warmup_epochs` passes
/// treating every training sample as its own class, with the live memory rows as
/// the classifier. The memory is refilled from current features afterwards.
pub fn warmup_init(
    ds: &SynthDataset,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainState, TrainError> {
    if ds.train.is_empty() {
        return Err(TrainError::Data("training split is empty".to_string()));
    }
    cfg.validate(ds.train_cameras().len())?;
    let n = ds.train.len();
    let mut theta = encoder::init_params(enc, cfg.seed);
    let mut outer = OuterState::new(cfg.outer_opt, theta.len());
    let feats = encode_train(ds, enc, &theta)?;
    let mut memory = FeatureMemory::from_features(&feats, cfg.alpha)?;

    let labeling = PseudoLabeling::exemplar(n);
    let loss_cfg = cfg.loss_config();
    let n_b = cfg.effective_batch_size(n);
    for w in 0..cfg.warmup_epochs {
        let mut rng = stream_rng(cfg.seed, PHASE_WARMUP, w);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (s, batch) in order.chunks(n_b).enumerate() {
            let centroids = memloss::build_centroids(&memory, &labeling, true)?;
            let exemplar: Vec<usize> = labeling.labels.clone();
            plain_step(
                ds, enc, cfg, &centroids, &exemplar, batch, &mut theta, &mut memory, &mut outer,
                loss_cfg,
            )
            .map_err(|e| e.at(w, s))?;
        }
    }

    let feats = encode_train(ds, enc, &theta)?;
    memory.refill(&feats)?;
    Ok(TrainState {
        theta,
        memory,
        epoch: 0,
        history: Vec::new(),
        outer,
    })
}

fn encode_train(
    ds: &SynthDataset,
    enc: &EncoderConfig,
    theta: &ParamVector,
) -> Result<FeatureMatrix, TrainError> {
    Ok(encoder::encode_batch(
        enc,
        theta,
        ds.train.iter().map(|s| s.x.as_slice()),
    )?)
}

// ── Steps ───────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub mtr: f64,
    pub mte: f64,
}

/// One loss step on `batch`: gradient at `theta`, optimizer update, then memory
/// updates with the features the forward pass saw (pre-update `theta`).
#[allow(clippy::too_many_arguments)]
fn plain_step(
    ds: &SynthDataset,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    centroids: &CentroidSet,
    labels: &[usize],
    batch: &[usize],
    theta: &mut ParamVector,
    memory: &mut FeatureMemory,
    outer: &mut OuterState,
    loss_cfg: LossConfig,
) -> Result<f64, TrainError> {
    let loss = BatchLoss::gather(ds, enc, labels, batch, centroids, loss_cfg);
    let g = autodiff::grad(&loss, theta).map_err(|e| step_error(e, "batch loss"))?;
    let feats = encoder::encode_batch(enc, theta, batch.iter().map(|&i| ds.train[i].x.as_slice()))?;
    outer.step(theta, &g.gradient, cfg.gamma)?;
    for (row, &i) in feats.rows().zip(batch) {
        memory.update(i, row)?;
    }
    Ok(g.loss)
}

/// One meta step. In the meta modes: meta-train loss at `theta`, inner step to
/// the temporary model, meta-test loss there, outer update with the combined
/// gradient, then memory updates from both forward passes (meta-train features
/// at `theta`, meta-test features at the temporary model). With `MetaMode::Off`
/// the two batches merge into one plain step.
#[allow(clippy::too_many_arguments)]
pub fn meta_step(
    ds: &SynthDataset,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    centroids: &CentroidSet,
    labels: &[usize],
    batch_tr: &[usize],
    batch_te: &[usize],
    theta: &mut ParamVector,
    memory: &mut FeatureMemory,
    outer: &mut OuterState,
) -> Result<StepLosses, TrainError> {
    if batch_tr.is_empty() || batch_te.is_empty() {
        return Err(TrainError::Data("meta step requires two non-empty batches".to_string()));
    }
    let loss_cfg = cfg.loss_config();
    match cfg.meta_mode {
        MetaMode::Off => {
            let union: Vec<usize> = batch_tr.iter().chain(batch_te).copied().collect();
            let l = plain_step(
                ds, enc, cfg, centroids, labels, &union, theta, memory, outer, loss_cfg,
            )?;
            Ok(StepLosses { mtr: l, mte: l })
        }
        MetaMode::Full | MetaMode::FirstOrder => {
            let loss_tr = BatchLoss::gather(ds, enc, labels, batch_tr, centroids, loss_cfg);
            let loss_te = BatchLoss::gather(ds, enc, labels, batch_te, centroids, loss_cfg);
            let inner = cfg.inner_gamma.unwrap_or(cfg.gamma);
            let order = match cfg.meta_mode {
                MetaMode::Full => SecondOrder::Exact,
                _ => SecondOrder::FirstOrder,
            };
            let res = autodiff::grad_through_update(&loss_tr, &loss_te, theta, inner, order)
                .map_err(|e| step_error(e, "meta objective"))?;
            let f_tr =
                encoder::encode_batch(enc, theta, batch_tr.iter().map(|&i| ds.train[i].x.as_slice()))?;
            let f_te = encoder::encode_batch(
                enc,
                &res.theta_prime,
                batch_te.iter().map(|&i| ds.train[i].x.as_slice()),
            )?;
            outer.step(theta, &res.gradient, cfg.gamma)?;
            for (row, &i) in f_tr.rows().zip(batch_tr) {
                memory.update(i, row)?;
            }
            for (row, &i) in f_te.rows().zip(batch_te) {
                memory.update(i, row)?;
            }
            Ok(StepLosses {
                mtr: res.loss_mtr,
                mte: res.loss_mte,
            })
        }
    }
}

// ── Label noise ─────────────────────────────────────────────────────────────

/// Flips `round(frac * |included|)` included labels to a uniformly random other
/// cluster, then compacts the label space over the included samples so no
/// downstream consumer sees an empty cluster. Labels of excluded samples are
/// remapped when their cluster survives and zeroed otherwise; excluded samples
/// never reach batches or centroids.
fn inject_label_noise(
    labeling: &PseudoLabeling,
    included: &[usize],
    frac: f64,
    rng: &mut ChaCha8Rng,
) -> PseudoLabeling {
    let mut out = labeling.clone();
    if frac > 0.0 && labeling.n_clusters >= 2 && !included.is_empty() {
        let k = ((frac * included.len() as f64).round() as usize).min(included.len());
        if k > 0 {
            let mut picks = index::sample(rng, included.len(), k).into_vec();
            picks.sort_unstable();
            for p in picks {
                let i = included[p];
                let current = out.labels[i];
                let draw = rng.gen_range(0..labeling.n_clusters - 1);
                out.labels[i] = if draw >= current { draw + 1 } else { draw };
            }
        }
    }
    compact_labels(&mut out, included);
    out
}

fn compact_labels(labeling: &mut PseudoLabeling, included: &[usize]) {
    let used: BTreeSet<usize> = included.iter().map(|&i| labeling.labels[i]).collect();
    if used.len() == labeling.n_clusters && used.iter().copied().eq(0..labeling.n_clusters) {
        return;
    }
    let remap: BTreeMap<usize, usize> = used
        .iter()
        .enumerate()
        .map(|(dense, &old)| (old, dense))
        .collect();
    for label in labeling.labels.iter_mut() {
        *label = remap.get(label).copied().unwrap_or(0);
    }
    labeling.n_clusters = used.len();
}

// ── Evaluation over the test split ──────────────────────────────────────────

/// Retrieval metrics on query vs gallery plus the camera distance gap over all
/// test samples, at the given parameters.
pub fn evaluate_model(
    ds: &SynthDataset,
    enc: &EncoderConfig,
    theta: &ParamVector,
    gap_opts: &GapOptions,
) -> Result<EvalSummary, TrainError> {
    let q_feats = encoder::encode_batch(enc, theta, ds.query.iter().map(|s| s.x.as_slice()))?;
    let g_feats = encoder::encode_batch(enc, theta, ds.gallery.iter().map(|s| s.x.as_slice()))?;
    let query = LabeledFeatures::new(
        q_feats.clone(),
        ds.query.iter().map(|s| s.person_id).collect(),
        ds.query.iter().map(|s| s.camera_id).collect(),
    )?;
    let gallery = LabeledFeatures::new(
        g_feats.clone(),
        ds.gallery.iter().map(|s| s.person_id).collect(),
        ds.gallery.iter().map(|s| s.camera_id).collect(),
    )?;
    let report = evaluation::cmc_map(&query, &gallery, &[1, 5])?;
    let rank_at = |r: usize| {
        report
            .cmc
            .iter()
            .find(|p| p.rank == r)
            .map_or(f64::NAN, |p| p.accuracy)
    };

    let mut rows: Vec<Vec<f64>> = q_feats.rows().map(<[f64]>::to_vec).collect();
    rows.extend(g_feats.rows().map(<[f64]>::to_vec));
    let test_set = LabeledFeatures::new(
        FeatureMatrix::from_rows(rows),
        ds.query
            .iter()
            .chain(&ds.gallery)
            .map(|s| s.person_id)
            .collect(),
        ds.query
            .iter()
            .chain(&ds.gallery)
            .map(|s| s.camera_id)
            .collect(),
    )?;
    let gap = evaluation::distance_gap(&test_set, gap_opts)?;
    Ok(EvalSummary {
        map: report.map,
        rank1: rank_at(1),
        rank5: rank_at(5),
        gap: gap.gap,
    })
}

// ── The epoch loop ──────────────────────────────────────────────────────────

fn run_epoch(
    ds: &SynthDataset,
    enc: &EncoderConfig,
    mining: &MiningParams,
    cfg: &TrainConfig,
    state: &mut TrainState,
    epoch: usize,
) -> Result<(), TrainError> {
    let n = ds.train.len();
    let feats = encode_train(ds, enc, &state.theta)?;
    let (mined, exemplar_fallback) = match clustering::mine_labels(&feats, mining) {
        Ok(out) => (out.labeling, false),
        Err(ClusterError::NoInliers) => (PseudoLabeling::exemplar(n), true),
        Err(e) => return Err(e.into()),
    };
    let truth: Vec<usize> = ds.train.iter().map(|s| s.person_id as usize).collect();
    let quality = evaluation::clustering_quality(&mined.labels, &truth)?;

    let included: Vec<usize> = if cfg.outliers_on {
        (0..n).collect()
    } else {
        (0..n).filter(|&i| mined.inlier_mask[i]).collect()
    };
    let labeling = inject_label_noise(
        &mined,
        &included,
        cfg.label_noise_frac,
        &mut stream_rng(cfg.seed, PHASE_NOISE, epoch),
    );
    let centroids = memloss::build_centroids(&state.memory, &labeling, cfg.outliers_on)?;

    let cameras: Vec<u32> = ds.train.iter().map(|s| s.camera_id).collect();
    let n_cams = ds.train_cameras().len();
    let mut split_rng = stream_rng(cfg.seed, PHASE_SPLIT, epoch);
    let split = if cfg.meta_mode == MetaMode::Off && n_cams < 2 {
        None
    } else {
        let s = split_by_camera(&cameras, &included, cfg.effective_n_mtr(n_cams), &mut split_rng)?;
        debug_assert_eq!(
            s.meta_train_idx.len() + s.meta_test_idx.len(),
            included.len()
        );
        Some(s)
    };

    let n_b = cfg.effective_batch_size(n);
    let mut batch_rng = stream_rng(cfg.seed, PHASE_BATCH, epoch);
    let (plan, plain_fallback) = match &split {
        Some(s) if !s.meta_train_idx.is_empty() && !s.meta_test_idx.is_empty() => {
            let plan = paired_batches(&s.meta_train_idx, &s.meta_test_idx, n_b, &mut batch_rng);
            (plan, false)
        }
        _ => {
            let mut pool = included.clone();
            pool.shuffle(&mut batch_rng);
            let plan = pool
                .chunks(n_b)
                .map(|c| (c.to_vec(), Vec::new()))
                .collect();
            (plan, true)
        }
    };

    let mut sum_mtr = 0.0;
    let mut sum_mte = 0.0;
    for (s, (b_tr, b_te)) in plan.iter().enumerate() {
        let losses = if plain_fallback {
            let l = plain_step(
                ds,
                enc,
                cfg,
                &centroids,
                &labeling.labels,
                b_tr,
                &mut state.theta,
                &mut state.memory,
                &mut state.outer,
                cfg.loss_config(),
            )
            .map_err(|e| e.at(epoch, s))?;
            StepLosses { mtr: l, mte: l }
        } else {
            meta_step(
                ds,
                enc,
                cfg,
                &centroids,
                &labeling.labels,
                b_tr,
                b_te,
                &mut state.theta,
                &mut state.memory,
                &mut state.outer,
            )
            .map_err(|e| e.at(epoch, s))?
        };
        sum_mtr += losses.mtr;
        sum_mte += losses.mte;
    }

    let steps = plan.len();
    let denom = steps.max(1) as f64;
    let eval = if cfg.eval_every > 0
        && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)
    {
        Some(evaluate_model(ds, enc, &state.theta, &GapOptions::default())?)
    } else {
        None
    };
    state.history.push(EpochRecord {
        epoch,
        n_clusters: mined.n_clusters,
        inlier_fraction: mined.inlier_fraction(),
        exemplar_fallback,
        plain_fallback,
        steps,
        mean_loss_mtr: sum_mtr / denom,
        mean_loss_mte: sum_mte / denom,
        mining_ari: quality.ari,
        mining_nmi: quality.nmi,
        eval,
    });
    state.epoch = epoch + 1;
    Ok(())
}

/// Warm-up followed by the full mining/meta loop.
pub fn train(
    ds: &SynthDataset,
    enc: &EncoderConfig,
    mining: &MiningParams,
    cfg: &TrainConfig,
) -> Result<TrainState, TrainError> {
    let state = warmup_init(ds, enc, cfg)?;
    train_with(ds, enc, mining, cfg, state, |_| Ok(()))
}

/// Runs the mining/meta loop from `state.epoch` up to `cfg.epochs`, calling
/// `on_epoch` after each completed epoch (for checkpointing). Feeding back a
/// state captured mid-run continues it exactly as the uninterrupted run.
pub fn train_with<F>(
    ds: &SynthDataset,
    enc: &EncoderConfig,
    mining: &MiningParams,
    cfg: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: F,
) -> Result<TrainState, TrainError>
where
    F: FnMut(&TrainState) -> Result<(), TrainError>,
{
    if ds.train.is_empty() {
        return Err(TrainError::Data("training split is empty".to_string()));
    }
    cfg.validate(ds.train_cameras().len())?;
    for epoch in state.epoch..cfg.epochs {
        run_epoch(ds, enc, mining, cfg, &mut state, epoch)?;
        on_epoch(&state)?;
    }
    Ok(state)
}
