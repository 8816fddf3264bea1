//! Subcommand implementations, callable as library functions. Every result file
//! carries the run's config hash so tables cannot silently mix runs.

use anyhow::{bail, Context, Result};
use camreid_core::datagen::{self, SynthDataset};
use camreid_core::encoder::{self, FeatureMatrix};
use camreid_core::evaluation::{self, DistanceGapReport, LabeledFeatures, RetrievalReport};
use camreid_core::trainer::{self, EvalSummary, MetaMode, TrainError, TrainState};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{config_hash, synth_hash, RunConfig};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating directory {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ── gen ─────────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Hash of the synth section alone; training checks it to catch stale
    /// dataset files without binding them to training hyperparameters.
    pub synth_hash: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_query: usize,
    pub n_gallery: usize,
    pub n_cameras: usize,
    pub input_dim: usize,
}

#[derive(Debug)]
pub struct GenOutput {
    pub dataset_path: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<GenOutput> {
    let ds = datagen::generate(&cfg.synth)?;
    let dataset_path = cfg.output_dir.join("dataset.tsv");
    write_text(&dataset_path, &datagen::to_text(&ds))?;
    let manifest = Manifest {
        config_hash: config_hash(cfg),
        synth_hash: synth_hash(&cfg.synth),
        seed: cfg.synth.seed,
        n_train: ds.train.len(),
        n_query: ds.query.len(),
        n_gallery: ds.gallery.len(),
        n_cameras: cfg.synth.n_cameras,
        input_dim: cfg.synth.input_dim,
    };
    let manifest_path = cfg.output_dir.join("manifest.json");
    write_text(
        &manifest_path,
        &format!("{}\n", serde_json::to_string_pretty(&manifest)?),
    )?;
    Ok(GenOutput {
        dataset_path,
        manifest_path,
        manifest,
    })
}

fn load_dataset(cfg: &RunConfig) -> Result<SynthDataset> {
    let dataset_path = cfg.output_dir.join("dataset.tsv");
    let text = fs::read_to_string(&dataset_path).with_context(|| {
        format!(
            "reading dataset {} (generate it with the gen command)",
            dataset_path.display()
        )
    })?;
    let ds = datagen::from_text(&text)?;
    let manifest: Manifest = read_json(&cfg.output_dir.join("manifest.json"))?;
    let expected = synth_hash(&cfg.synth);
    if manifest.synth_hash != expected {
        bail!(
            "dataset in {} was generated from different synth settings ({} vs {}); rerun gen",
            cfg.output_dir.display(),
            manifest.synth_hash,
            expected
        );
    }
    Ok(ds)
}

// ── train ───────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub state: TrainState,
}

#[derive(Serialize)]
struct HistoryLineRef<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    record: &'a trainer::EpochRecord,
}

/// One parsed `history.jsonl` line.
#[derive(Debug, Deserialize)]
pub struct HistoryLine {
    pub config_hash: String,
    #[serde(flatten)]
    pub record: trainer::EpochRecord,
}

fn render_history(history: &[trainer::EpochRecord], hash: &str) -> Result<String> {
    let mut out = String::new();
    for record in history {
        let line = serde_json::to_string(&HistoryLineRef {
            config_hash: hash,
            record,
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

fn write_checkpoint(path: &Path, hash: &str, state: &TrainState) -> Result<()> {
    let ckpt = serde_json::to_string(&Checkpoint {
        config_hash: hash.to_string(),
        state: state.clone(),
    })?;
    write_text(path, &format!("{ckpt}\n"))
}

#[derive(Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub history_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Trains per the config, writing `history.jsonl`, a rolling `checkpoint.json`,
/// and one checkpoint per epoch under `checkpoints/`. With `resume` the rolling
/// checkpoint is loaded and training continues from its epoch; the config hash
/// must match the one the checkpoint was written under.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutput> {
    let ds = load_dataset(cfg)?;
    let hash = config_hash(cfg);
    let history_path = cfg.output_dir.join("history.jsonl");
    let checkpoint_path = cfg.output_dir.join("checkpoint.json");

    let initial = if resume {
        let ckpt: Checkpoint = read_json(&checkpoint_path)
            .context("loading the rolling checkpoint for resume")?;
        if ckpt.config_hash != hash {
            bail!(
                "checkpoint {} was written under config {}, current config is {}",
                checkpoint_path.display(),
                ckpt.config_hash,
                hash
            );
        }
        ckpt.state
    } else {
        trainer::warmup_init(&ds, &cfg.encoder, &cfg.train)?
    };

    let epoch_dir = cfg.output_dir.join("checkpoints");
    let state = trainer::train_with(
        &ds,
        &cfg.encoder,
        &cfg.mining,
        &cfg.train,
        initial,
        |s| {
            let save = || -> Result<()> {
                let completed = s.epoch - 1;
                write_checkpoint(&epoch_dir.join(format!("epoch_{completed:03}.json")), &hash, s)?;
                write_checkpoint(&checkpoint_path, &hash, s)?;
                write_text(&history_path, &render_history(&s.history, &hash)?)?;
                Ok(())
            };
            save().map_err(|e| TrainError::Callback(format!("{e:#}")))
        },
    )?;

    write_checkpoint(&checkpoint_path, &hash, &state)?;
    write_text(&history_path, &render_history(&state.history, &hash)?)?;
    Ok(TrainOutput {
        state,
        history_path,
        checkpoint_path,
    })
}

/// Parses a history file back into lines.
pub fn read_history(path: &Path) -> Result<Vec<HistoryLine>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing history line in {}", path.display())))
        .collect()
}

// ── eval ────────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    /// Hash recorded inside the evaluated checkpoint.
    pub checkpoint_hash: String,
    pub checkpoint_epoch: usize,
    pub retrieval: RetrievalReport,
    pub gap: DistanceGapReport,
}

#[derive(Debug)]
pub struct EvalOutput {
    pub report_path: PathBuf,
    pub histogram_path: PathBuf,
    pub report: EvalReport,
}

fn encode_labeled(
    cfg: &RunConfig,
    theta: &camreid_core::autodiff::ParamVector,
    samples: &[datagen::Sample],
) -> Result<LabeledFeatures> {
    let feats = encoder::encode_batch(&cfg.encoder, theta, samples.iter().map(|s| s.x.as_slice()))?;
    Ok(LabeledFeatures::new(
        feats,
        samples.iter().map(|s| s.person_id).collect(),
        samples.iter().map(|s| s.camera_id).collect(),
    )?)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalOutput> {
    let ds = load_dataset(cfg)?;
    let default_path = cfg.output_dir.join("checkpoint.json");
    let ckpt_path = checkpoint.unwrap_or(&default_path);
    let ckpt: Checkpoint = read_json(ckpt_path)?;
    let theta = &ckpt.state.theta;

    let query = encode_labeled(cfg, theta, &ds.query)?;
    let gallery = encode_labeled(cfg, theta, &ds.gallery)?;
    let retrieval = evaluation::cmc_map(&query, &gallery, &cfg.eval.ranks)?;

    let test_samples: Vec<datagen::Sample> =
        ds.query.iter().chain(&ds.gallery).cloned().collect();
    let test_set = encode_labeled(cfg, theta, &test_samples)?;
    let gap = evaluation::distance_gap(&test_set, &cfg.eval.gap_options())?;

    let report = EvalReport {
        config_hash: config_hash(cfg),
        checkpoint_hash: ckpt.config_hash,
        checkpoint_epoch: ckpt.state.epoch,
        retrieval,
        gap,
    };
    let report_path = cfg.output_dir.join("eval_report.json");
    write_text(
        &report_path,
        &format!("{}\n", serde_json::to_string_pretty(&report)?),
    )?;

    let mut csv = format!("# config_hash={}\n", report.config_hash);
    csv.push_str("bin_left,bin_right,intra_count,inter_count\n");
    let h = &report.gap.histogram;
    for i in 0..h.intra.len() {
        writeln!(csv, "{},{},{},{}", h.edges[i], h.edges[i + 1], h.intra[i], h.inter[i]).unwrap();
    }
    let histogram_path = cfg.output_dir.join("gap_histogram.csv");
    write_text(&histogram_path, &csv)?;

    Ok(EvalOutput {
        report_path,
        histogram_path,
        report,
    })
}

// ── ablate ──────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub no: u8,
    pub outliers: bool,
    pub dsce: bool,
    pub metacam: bool,
}

/// The five-row configuration grid: outliers excluded entirely, then the four
/// on/off combinations of the soft loss and meta-optimization.
pub const ABLATION_GRID: [AblationFlags; 5] = [
    AblationFlags { no: 1, outliers: false, dsce: false, metacam: false },
    AblationFlags { no: 2, outliers: true, dsce: false, metacam: false },
    AblationFlags { no: 3, outliers: true, dsce: true, metacam: false },
    AblationFlags { no: 4, outliers: true, dsce: false, metacam: true },
    AblationFlags { no: 5, outliers: true, dsce: true, metacam: true },
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblateRow {
    pub flags: AblationFlags,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub gap: f64,
    pub seed: u64,
    pub status: String,
}

#[derive(Debug)]
pub struct AblateOutput {
    pub table_path: PathBuf,
    pub rows: Vec<AblateRow>,
}

fn run_variant(cfg: &RunConfig, ds: &SynthDataset) -> Result<EvalSummary, TrainError> {
    let state = trainer::train(ds, &cfg.encoder, &cfg.mining, &cfg.train)?;
    trainer::evaluate_model(ds, &cfg.encoder, &state.theta, &cfg.eval.gap_options())
}

/// Trains the five ablation rows on one shared dataset and writes
/// `ablation.csv`. A failing row is recorded with NaN metrics and its status;
/// the remaining rows still run.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblateOutput> {
    let ds = datagen::generate(&cfg.synth)?;
    let mut rows = Vec::with_capacity(ABLATION_GRID.len());
    for flags in ABLATION_GRID {
        let mut row_cfg = cfg.clone();
        row_cfg.train.outliers_on = flags.outliers;
        row_cfg.train.dsce_on = flags.dsce;
        row_cfg.train.meta_mode = if flags.metacam {
            MetaMode::Full
        } else {
            MetaMode::Off
        };
        let (map, rank1, rank5, gap, status) = match run_variant(&row_cfg, &ds) {
            Ok(summary) => (
                summary.map,
                summary.rank1,
                summary.rank5,
                summary.gap.unwrap_or(f64::NAN),
                "ok".to_string(),
            ),
            Err(e) if e.is_divergence() => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, "diverged".to_string()),
            Err(e) => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, format!("error: {e}")),
        };
        rows.push(AblateRow {
            flags,
            map,
            rank1,
            rank5,
            gap,
            seed: cfg.synth.seed,
            status,
        });
    }

    let mut csv = format!("# config_hash={}\n", config_hash(cfg));
    csv.push_str("no,outliers,dsce,metacam,map,rank1,rank5,gap,seed,status\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            r.flags.no,
            r.flags.outliers,
            r.flags.dsce,
            if r.flags.metacam { "full" } else { "off" },
            r.map,
            r.rank1,
            r.rank5,
            r.gap,
            r.seed,
            r.status
        )
        .unwrap();
    }
    let table_path = cfg.output_dir.join("ablation.csv");
    write_text(&table_path, &csv)?;
    Ok(AblateOutput { table_path, rows })
}

/// Parses an `ablation.csv` written by [`cmd_ablate`].
pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblateRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("no,") || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(10, ',').collect();
        if fields.len() != 10 {
            bail!("malformed ablation row `{line}` in {}", path.display());
        }
        let parse_bool = |s: &str| -> Result<bool> {
            s.parse::<bool>()
                .with_context(|| format!("boolean field `{s}` in {}", path.display()))
        };
        rows.push(AblateRow {
            flags: AblationFlags {
                no: fields[0].parse().context("row number")?,
                outliers: parse_bool(fields[1])?,
                dsce: parse_bool(fields[2])?,
                metacam: fields[3] == "full",
            },
            map: fields[4].parse().context("map")?,
            rank1: fields[5].parse().context("rank1")?,
            rank5: fields[6].parse().context("rank5")?,
            gap: fields[7].parse().context("gap")?,
            seed: fields[8].parse().context("seed")?,
            status: fields[9].to_string(),
        });
    }
    Ok(rows)
}

// ── sweep ───────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    NMtr,
    Tau,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::NMtr => "n_mtr",
            SweepParam::Tau => "tau",
        }
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "n_mtr" => Ok(SweepParam::NMtr),
            "tau" => Ok(SweepParam::Tau),
            other => Err(format!("unknown sweep parameter `{other}` (expected n_mtr or tau)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub map: f64,
    pub rank1: f64,
    pub diverged: bool,
}

#[derive(Debug)]
pub struct SweepOutput {
    pub table_path: PathBuf,
    pub rows: Vec<SweepRow>,
}

/// One training and evaluation run per value, same data and seed throughout.
/// Diverging runs become NaN rows with the flag set instead of aborting the
/// sweep; invalid values are rejected before any training starts.
pub fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<SweepOutput> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    for &v in values {
        match param {
            SweepParam::NMtr => {
                let max = cfg.synth.n_cameras.saturating_sub(1);
                if v.fract() != 0.0 || v < 1.0 || v > max as f64 {
                    bail!("n_mtr value {v} must be an integer in 1..={max}");
                }
            }
            SweepParam::Tau => {
                if !(v.is_finite() && v > 0.0) {
                    bail!("tau value {v} must be positive");
                }
            }
        }
    }

    let ds = datagen::generate(&cfg.synth)?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut row_cfg = cfg.clone();
        match param {
            SweepParam::NMtr => row_cfg.train.n_meta_train_cams = Some(v as usize),
            SweepParam::Tau => row_cfg.train.tau = v,
        }
        let row = match run_variant(&row_cfg, &ds) {
            Ok(summary) => SweepRow {
                value: v,
                map: summary.map,
                rank1: summary.rank1,
                diverged: false,
            },
            Err(e) if e.is_divergence() => SweepRow {
                value: v,
                map: f64::NAN,
                rank1: f64::NAN,
                diverged: true,
            },
            Err(e) => return Err(e.into()),
        };
        rows.push(row);
    }

    let mut csv = format!("# config_hash={}\n", config_hash(cfg));
    csv.push_str("param,value,map,rank1,diverged\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", param.name(), r.value, r.map, r.rank1, r.diverged).unwrap();
    }
    let table_path = cfg.output_dir.join(format!("sweep_{}.csv", param.name()));
    write_text(&table_path, &csv)?;
    Ok(SweepOutput { table_path, rows })
}

// ── shared helpers for consumers ────────────────────────────────────────────

/// Concatenated query and gallery features of a dataset under `theta`, for
/// gap-style diagnostics outside the commands.
pub fn test_features(
    cfg: &RunConfig,
    theta: &camreid_core::autodiff::ParamVector,
    ds: &SynthDataset,
) -> Result<LabeledFeatures> {
    let samples: Vec<datagen::Sample> = ds.query.iter().chain(&ds.gallery).cloned().collect();
    encode_labeled(cfg, theta, &samples)
}

/// Re-encodes the training split and reports the features; used by diagnostics
/// and tests that need mining inputs outside a training run.
pub fn train_features(
    cfg: &RunConfig,
    theta: &camreid_core::autodiff::ParamVector,
    ds: &SynthDataset,
) -> Result<FeatureMatrix> {
    Ok(encoder::encode_batch(
        &cfg.encoder,
        theta,
        ds.train.iter().map(|s| s.x.as_slice()),
    )?)
}
