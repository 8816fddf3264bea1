//! Seeded synthetic multi-camera re-identification data.
//!
//! Each identity is a Gaussian center in input space; each camera is an affine
//! distortion `A_c x + b_c` with `A_c = I + scale * G_c`. Samples are distorted
//! centers plus isotropic noise, so `camera_shift_scale` directly controls how far the
//! same identity drifts apart across cameras. Train and test identities are disjoint;
//! per test identity every camera contributes one gallery sample and one held-out
//! query sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_identities_train: usize,
    pub n_identities_test: usize,
    pub samples_per_identity_per_camera: usize,
    pub n_cameras: usize,
    pub input_dim: usize,
    /// Strength of the per-camera affine distortion; 0 removes cameras entirely.
    pub camera_shift_scale: f64,
    /// Isotropic per-coordinate sample noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_identities_train: 24,
            n_identities_test: 12,
            samples_per_identity_per_camera: 3,
            n_cameras: 4,
            input_dim: 16,
            camera_shift_scale: 1.0,
            noise_sigma: 0.05,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub person_id: u32,
    pub camera_id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl SynthDataset {
    pub fn input_dim(&self) -> usize {
        self.train
            .first()
            .or(self.gallery.first())
            .map_or(0, |s| s.x.len())
    }

    /// Sorted unique camera ids present in the training split.
    pub fn train_cameras(&self) -> Vec<u32> {
        let mut cams: Vec<u32> = self.train.iter().map(|s| s.camera_id).collect();
        cams.sort_unstable();
        cams.dedup();
        cams
    }
}

/// Relative strength of the multiplicative camera distortion.
const AFFINE_SCALE: f64 = 0.25;
/// Relative strength of the additive per-camera offset. The bias dominates the
/// distortion so camera shift is a coherent displacement per camera, roughly a
/// third of the typical identity separation at shift scale 1.
const BIAS_SCALE: f64 = 2.0;

struct Camera {
    /// Row-major d x d distortion, applied as `(I + M) x`.
    m: Vec<f64>,
    b: Vec<f64>,
}

fn draw_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl Camera {
    fn draw(rng: &mut ChaCha8Rng, d: usize, shift: f64) -> Self {
        let g_std = shift * AFFINE_SCALE / (d as f64).sqrt();
        let b_std = shift * BIAS_SCALE / (d as f64).sqrt();
        let m: Vec<f64> = (0..d * d).map(|_| draw_normal(rng) * g_std).collect();
        let b: Vec<f64> = (0..d).map(|_| draw_normal(rng) * b_std).collect();
        Camera { m, b }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut out = Vec::with_capacity(d);
        for i in 0..d {
            let mut v = x[i] + self.b[i];
            for j in 0..d {
                v += self.m[i * d + j] * x[j];
            }
            out.push(v);
        }
        out
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, DatagenError> {
    if cfg.n_cameras < 2 {
        return Err(DatagenError::Config(
            "at least two cameras are required".to_string(),
        ));
    }
    if cfg.input_dim == 0 {
        return Err(DatagenError::Config("input_dim must be positive".to_string()));
    }
    if cfg.n_identities_train == 0 || cfg.n_identities_test == 0 {
        return Err(DatagenError::Config(
            "both identity splits must be nonempty".to_string(),
        ));
    }
    if cfg.samples_per_identity_per_camera == 0 {
        return Err(DatagenError::Config(
            "samples_per_identity_per_camera must be positive".to_string(),
        ));
    }
    if !(cfg.camera_shift_scale.is_finite() && cfg.camera_shift_scale >= 0.0) {
        return Err(DatagenError::Config(
            "camera_shift_scale must be finite and nonnegative".to_string(),
        ));
    }
    if !(cfg.noise_sigma.is_finite() && cfg.noise_sigma >= 0.0) {
        return Err(DatagenError::Config(
            "noise_sigma must be finite and nonnegative".to_string(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.input_dim;
    let n_ids = cfg.n_identities_train + cfg.n_identities_test;
    let centers: Vec<Vec<f64>> = (0..n_ids)
        .map(|_| (0..d).map(|_| draw_normal(&mut rng)).collect())
        .collect();
    let cameras: Vec<Camera> = (0..cfg.n_cameras)
        .map(|_| Camera::draw(&mut rng, d, cfg.camera_shift_scale))
        .collect();

    let draw_sample = |rng: &mut ChaCha8Rng, id: usize, cam: usize| -> Sample {
        let mut x = cameras[cam].apply(&centers[id]);
        if cfg.noise_sigma > 0.0 {
            for v in &mut x {
                *v += draw_normal(rng) * cfg.noise_sigma;
            }
        }
        Sample {
            x,
            person_id: id as u32,
            camera_id: cam as u32,
        }
    };

    let mut train = Vec::new();
    for id in 0..cfg.n_identities_train {
        for cam in 0..cfg.n_cameras {
            for _ in 0..cfg.samples_per_identity_per_camera {
                train.push(draw_sample(&mut rng, id, cam));
            }
        }
    }

    let mut gallery = Vec::new();
    let mut query = Vec::new();
    for id in cfg.n_identities_train..n_ids {
        for cam in 0..cfg.n_cameras {
            gallery.push(draw_sample(&mut rng, id, cam));
            query.push(draw_sample(&mut rng, id, cam));
        }
    }

    Ok(SynthDataset {
        train,
        query,
        gallery,
    })
}

/// Per-camera sample counts over the training split, sorted by camera id.
pub fn camera_histogram(samples: &[Sample]) -> Vec<(u32, usize)> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.camera_id).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}

// ── Columnar text format ────────────────────────────────────────────────────

const FORMAT_HEADER: &str = "camreid-dataset v1";

/// Serializes the dataset as whitespace-separated columns:
/// `split person_id camera_id x0 x1 ...`, one sample per row, after a version header.
/// Floats use the shortest round-trip decimal form, so identical datasets serialize to
/// identical bytes.
pub fn to_text(ds: &SynthDataset) -> String {
    let mut out = String::new();
    out.push_str(FORMAT_HEADER);
    out.push('\n');
    for (tag, split) in [
        ("train", &ds.train),
        ("query", &ds.query),
        ("gallery", &ds.gallery),
    ] {
        for s in split {
            write!(out, "{tag} {} {}", s.person_id, s.camera_id).unwrap();
            for v in &s.x {
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn from_text(text: &str) -> Result<SynthDataset, DatagenError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == FORMAT_HEADER => {}
        other => {
            return Err(DatagenError::Parse {
                line: 1,
                msg: format!(
                    "expected header `{FORMAT_HEADER}`, found {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            })
        }
    }
    let mut ds = SynthDataset {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    let mut dim: Option<usize> = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let tag = fields.next().unwrap();
        let parse_err = |msg: String| DatagenError::Parse { line: line_no, msg };
        let person_id: u32 = fields
            .next()
            .ok_or_else(|| parse_err("missing person_id".to_string()))?
            .parse()
            .map_err(|e| parse_err(format!("bad person_id: {e}")))?;
        let camera_id: u32 = fields
            .next()
            .ok_or_else(|| parse_err("missing camera_id".to_string()))?
            .parse()
            .map_err(|e| parse_err(format!("bad camera_id: {e}")))?;
        let x: Vec<f64> = fields
            .map(|f| f.parse().map_err(|e| parse_err(format!("bad value: {e}"))))
            .collect::<Result<_, _>>()?;
        if x.is_empty() {
            return Err(parse_err("sample has no feature values".to_string()));
        }
        match dim {
            None => dim = Some(x.len()),
            Some(d) if d != x.len() => {
                return Err(parse_err(format!(
                    "inconsistent dimension: expected {d}, got {}",
                    x.len()
                )))
            }
            _ => {}
        }
        let sample = Sample {
            x,
            person_id,
            camera_id,
        };
        match tag {
            "train" => ds.train.push(sample),
            "query" => ds.query.push(sample),
            "gallery" => ds.gallery.push(sample),
            other => return Err(parse_err(format!("unknown split tag `{other}`"))),
        }
    }
    Ok(ds)
}
