use std::path::PathBuf;
use std::process::ExitCode;

use camreid_cli::commands::{self, SweepParam};
use camreid_cli::config::{config_hash, Overrides, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "camreid", version, about = "Camera-aware unsupervised re-identification, desk scale")]
struct Cli {
    /// TOML run config; built-in defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset into the output directory.
    Gen,
    /// Train, writing history and checkpoints into the output directory.
    Train {
        /// Continue from the rolling checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the query/gallery split.
    Eval {
        /// Checkpoint to evaluate; defaults to the rolling one in the output
        /// directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the five-row ablation grid on one dataset.
    Ablate,
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        /// Which hyperparameter to sweep: n_mtr or tau.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values to try.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    println!("config {}", config_hash(&cfg));
    match cli.cmd {
        Cmd::Gen => {
            let out = commands::cmd_gen(&cfg)?;
            println!(
                "wrote {} ({} train, {} query, {} gallery)",
                out.dataset_path.display(),
                out.manifest.n_train,
                out.manifest.n_query,
                out.manifest.n_gallery
            );
        }
        Cmd::Train { resume } => {
            let out = commands::cmd_train(&cfg, resume)?;
            println!(
                "trained through epoch {}; history at {}",
                out.state.epoch,
                out.history_path.display()
            );
            if let Some(eval) = out.state.history.last().and_then(|r| r.eval.as_ref()) {
                println!(
                    "final eval: map {:.4}, rank-1 {:.4}, rank-5 {:.4}",
                    eval.map, eval.rank1, eval.rank5
                );
            }
        }
        Cmd::Eval { checkpoint } => {
            let out = commands::cmd_eval(&cfg, checkpoint.as_deref())?;
            let r = &out.report;
            println!(
                "epoch {}: map {:.4}, cmc {:?}",
                r.checkpoint_epoch,
                r.retrieval.map,
                r.retrieval
                    .cmc
                    .iter()
                    .map(|p| format!("r{}={:.4}", p.rank, p.accuracy))
                    .collect::<Vec<_>>()
            );
            match r.gap.gap {
                Some(gap) => println!("camera distance gap {gap:.4}"),
                None => println!("camera distance gap undefined (a pair kind is absent)"),
            }
            println!("report at {}", out.report_path.display());
        }
        Cmd::Ablate => {
            let out = commands::cmd_ablate(&cfg)?;
            for row in &out.rows {
                println!(
                    "no.{} outliers={} dsce={} metacam={}: map {:.4} ({})",
                    row.flags.no,
                    row.flags.outliers,
                    row.flags.dsce,
                    row.flags.metacam,
                    row.map,
                    row.status
                );
            }
            println!("table at {}", out.table_path.display());
        }
        Cmd::Sweep { param, values } => {
            let out = commands::cmd_sweep(&cfg, param, &values)?;
            for row in &out.rows {
                if row.diverged {
                    println!("{}={}: diverged", param.name(), row.value);
                } else {
                    println!("{}={}: map {:.4}", param.name(), row.value, row.map);
                }
            }
            println!("table at {}", out.table_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
