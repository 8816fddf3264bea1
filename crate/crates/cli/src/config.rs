//! Run configuration: one TOML file covering data generation, the encoder, label
//! mining, training, and evaluation, plus flag overrides and the config hash that
//! is stamped into every result file.

use anyhow::{bail, Context, Result};
use camreid_core::clustering::MiningParams;
use camreid_core::datagen::SynthConfig;
use camreid_core::encoder::EncoderConfig;
use camreid_core::evaluation::GapOptions;
use camreid_core::trainer::{MetaMode, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// CMC ranks reported alongside mAP.
    pub ranks: Vec<usize>,
    /// Cap on each pair population entering the distance gap.
    pub max_pairs: usize,
    /// Histogram bins in the gap report.
    pub n_bins: usize,
    /// Seed for the gap pair subsample.
    pub gap_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ranks: vec![1, 5],
            max_pairs: 50_000,
            n_bins: 40,
            gap_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn gap_options(&self) -> GapOptions {
        GapOptions {
            max_pairs: self.max_pairs,
            n_bins: self.n_bins,
            seed: self.gap_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Where every artifact of this run is written.
    pub output_dir: PathBuf,
    pub synth: SynthConfig,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
    pub mining: MiningParams,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Encoder sized for the default synthetic data (the component default is wider
/// than the default input dimension).
fn default_encoder() -> EncoderConfig {
    EncoderConfig {
        input_dim: SynthConfig::default().input_dim,
        hidden_dims: vec![32],
        feature_dim: 16,
        ..EncoderConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            synth: SynthConfig::default(),
            encoder: default_encoder(),
            mining: MiningParams::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `path` (or starts from defaults), applies the flag overrides, and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        overrides.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.input_dim != self.synth.input_dim {
            bail!(
                "encoder input_dim {} does not match synth input_dim {}",
                self.encoder.input_dim,
                self.synth.input_dim
            );
        }
        self.train
            .validate(self.synth.n_cameras)
            .context("train section")?;
        if self.eval.ranks.is_empty() {
            bail!("eval.ranks must name at least one rank");
        }
        if self.eval.n_bins == 0 || self.eval.max_pairs == 0 {
            bail!("eval.n_bins and eval.max_pairs must be positive");
        }
        Ok(())
    }
}

fn short_hash(json: &str) -> String {
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(16);
    for byte in &digest[..8] {
        write!(out, "{byte:02x}").unwrap();
    }
    out
}

/// Hash identifying the run's science settings. The output directory is
/// excluded so the same experiment hashes equally wherever it is written.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut stripped = cfg.clone();
    stripped.output_dir = PathBuf::new();
    short_hash(&serde_json::to_string(&stripped).expect("config serializes"))
}

/// Hash of the data-generation settings alone, used to detect stale dataset
/// files without tying them to training hyperparameters.
pub fn synth_hash(cfg: &SynthConfig) -> String {
    short_hash(&serde_json::to_string(cfg).expect("config serializes"))
}

fn parse_meta_mode(s: &str) -> std::result::Result<MetaMode, String> {
    match s {
        "full" => Ok(MetaMode::Full),
        "first_order" => Ok(MetaMode::FirstOrder),
        "off" => Ok(MetaMode::Off),
        other => Err(format!(
            "unknown meta mode `{other}` (expected full, first_order, or off)"
        )),
    }
}

/// Command-line overrides layered on top of the config file.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset generation seed.
    #[arg(long, global = true)]
    pub data_seed: Option<u64>,
    /// Mining epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub warmup_epochs: Option<usize>,
    /// Learning rate gamma.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Softmax temperature tau.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Memory momentum alpha.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Meta-train camera count n_mtr.
    #[arg(long, global = true)]
    pub n_mtr: Option<usize>,
    /// Batch size n_b.
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// full, first_order, or off.
    #[arg(long, global = true, value_parser = parse_meta_mode)]
    pub meta_mode: Option<MetaMode>,
    /// Toggle the soft noise-tolerant loss term.
    #[arg(long, global = true)]
    pub dsce: Option<bool>,
    /// Toggle outlier inclusion in training.
    #[arg(long, global = true)]
    pub outliers: Option<bool>,
    /// Symmetric label-noise fraction injected into mined labels.
    #[arg(long, global = true)]
    pub label_noise: Option<f64>,
    /// Camera shift strength of the generated data.
    #[arg(long, global = true)]
    pub camera_shift: Option<f64>,
    /// Per-coordinate sample noise of the generated data.
    #[arg(long, global = true)]
    pub noise_sigma: Option<f64>,
    /// Evaluation interval in epochs (0 disables history evals).
    #[arg(long, global = true)]
    pub eval_every: Option<usize>,
    /// Disable feature normalization in the encoder.
    #[arg(long, global = true)]
    pub no_normalize: bool,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.data_seed {
            cfg.synth.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.warmup_epochs {
            cfg.train.warmup_epochs = v;
        }
        if let Some(v) = self.gamma {
            cfg.train.gamma = v;
        }
        if let Some(v) = self.tau {
            cfg.train.tau = v;
        }
        if let Some(v) = self.alpha {
            cfg.train.alpha = v;
        }
        if let Some(v) = self.n_mtr {
            cfg.train.n_meta_train_cams = Some(v);
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.meta_mode {
            cfg.train.meta_mode = v;
        }
        if let Some(v) = self.dsce {
            cfg.train.dsce_on = v;
        }
        if let Some(v) = self.outliers {
            cfg.train.outliers_on = v;
        }
        if let Some(v) = self.label_noise {
            cfg.train.label_noise_frac = v;
        }
        if let Some(v) = self.camera_shift {
            cfg.synth.camera_shift_scale = v;
        }
        if let Some(v) = self.noise_sigma {
            cfg.synth.noise_sigma = v;
        }
        if let Some(v) = self.eval_every {
            cfg.train.eval_every = v;
        }
        if self.no_normalize {
            cfg.encoder.normalize = false;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
    }
}
