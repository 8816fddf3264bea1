//! Small MLP feature encoder with optional L2-normalized output.
//!
//! The forward pass is written once, against the autodiff tape; plain feature
//! extraction simply records parameters as constants, so the mining/evaluation path
//! and the loss path compute bit-identical features.

use crate::autodiff::{AdError, ParamLayout, ParamVector, Scalar, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("input has {got} dimensions, encoder expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("feature vector is exactly zero before normalization")]
    DegenerateFeature,
    #[error("parameter vector does not match the encoder layout")]
    LayoutMismatch,
}

impl From<EncoderError> for AdError {
    fn from(e: EncoderError) -> Self {
        AdError::Build(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub nonlinearity: Nonlinearity,
    /// Project features onto the unit sphere (cosine-style geometry downstream).
    pub normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 32,
            hidden_dims: vec![64],
            feature_dim: 32,
            nonlinearity: Nonlinearity::Tanh,
            normalize: true,
        }
    }
}

impl EncoderConfig {
    /// Layer widths from input to feature output.
    fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims
    }

    /// Parameter layout: per layer a row-major `layer{i}.weight` block (out x in)
    /// followed by `layer{i}.bias`.
    pub fn layout(&self) -> ParamLayout {
        let dims = self.dims();
        let mut segments = Vec::new();
        for i in 0..dims.len() - 1 {
            segments.push((format!("layer{i}.weight"), dims[i] * dims[i + 1]));
            segments.push((format!("layer{i}.bias"), dims[i + 1]));
        }
        ParamLayout::new(segments)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total_len()
    }
}

/// Seeded parameter initialization: weights zero-mean normal with standard deviation
/// `1/sqrt(fan_in)`, biases zero.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = cfg.dims();
    let mut values = Vec::with_capacity(cfg.param_count());
    for i in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push(z * scale);
        }
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ParamVector::new(cfg.layout(), values).expect("layout matches generated values")
}

/// Records the encoder forward pass for one input onto an existing tape. `theta` must
/// hold one tape var per parameter, in layout order. Hidden layers apply the
/// nonlinearity; the final layer is affine, optionally L2-normalized.
pub fn forward_on_tape<S: Scalar>(
    cfg: &EncoderConfig,
    tape: &mut Tape<S>,
    theta: &[Var],
    x: &[f64],
) -> Result<Vec<Var>, EncoderError> {
    if x.len() != cfg.input_dim {
        return Err(EncoderError::InputDim {
            expected: cfg.input_dim,
            got: x.len(),
        });
    }
    if theta.len() != cfg.param_count() {
        return Err(EncoderError::LayoutMismatch);
    }
    let dims = cfg.dims();
    let mut offset = 0;
    let mut acts: Vec<Var> = Vec::new();
    for i in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let weights = &theta[offset..offset + fan_in * fan_out];
        offset += fan_in * fan_out;
        let biases = &theta[offset..offset + fan_out];
        offset += fan_out;
        let mut next = Vec::with_capacity(fan_out);
        for j in 0..fan_out {
            let row = &weights[j * fan_in..(j + 1) * fan_in];
            let pre = if i == 0 {
                tape.dot_const(row, x)
            } else {
                tape.dot(row, &acts)
            };
            let mut h = tape.add(pre, biases[j]);
            let last_layer = i == dims.len() - 2;
            if !last_layer {
                h = match cfg.nonlinearity {
                    Nonlinearity::Tanh => tape.tanh(h),
                    Nonlinearity::Identity => h,
                };
            }
            next.push(h);
        }
        acts = next;
    }
    if cfg.normalize {
        let sq = tape.dot(&acts, &acts);
        if tape.value(sq).re() == 0.0 {
            return Err(EncoderError::DegenerateFeature);
        }
        let norm = tape.sqrt(sq);
        acts = acts.iter().map(|&a| tape.div(a, norm)).collect();
    }
    Ok(acts)
}

/// Plain feature extraction (no gradient tracking).
pub fn encode(cfg: &EncoderConfig, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>, EncoderError> {
    if theta.len() != cfg.param_count() {
        return Err(EncoderError::LayoutMismatch);
    }
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = theta.values().iter().map(|&v| tape.constant(v)).collect();
    let out = forward_on_tape(cfg, &mut tape, &vars, x)?;
    Ok(out.iter().map(|&v| tape.value(v)).collect())
}

/// Row-major feature grid, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl FeatureMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * d);
        for row in rows {
            assert_eq!(row.len(), d, "all feature rows must share a dimension");
            data.extend_from_slice(&row);
        }
        FeatureMatrix { data, n, d }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n).map(move |i| self.row(i))
    }
}

/// Encodes a batch of inputs into a feature matrix.
pub fn encode_batch<'a, I>(
    cfg: &EncoderConfig,
    theta: &ParamVector,
    inputs: I,
) -> Result<FeatureMatrix, EncoderError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut rows = Vec::new();
    for x in inputs {
        rows.push(encode(cfg, theta, x)?);
    }
    Ok(FeatureMatrix::from_rows(rows))
}
