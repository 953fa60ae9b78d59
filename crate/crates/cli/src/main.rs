use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use seld::inference::InferenceMode;
use seld::training::Component;
use seld_cli::commands::{cmd_eval, cmd_infer, cmd_run_all, cmd_train, report_cache};
use seld_cli::config::{keys_help, ExperimentConfig};
use seld_cli::dataset::{build_features, synth};

#[derive(Parser)]
#[command(name = "seld", version, about = "Sequential DOA localization and location-conditioned classification for FOA scenes")]
#[command(after_long_help = keys_help())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file; every key is optional.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set seed=7` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for per-scene stages (default: all cores).
    #[arg(long, short, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate scenes: WAV + annotation CSV per scene and a manifest.
    Synth,
    /// Compute and cache the feature tensor of every scene.
    Features {
        /// Rebuild even when a cached tensor is present.
        #[arg(long)]
        force: bool,
    },
    /// Train the localizer on the training split.
    TrainLoc,
    /// Train the classifier on the training split.
    TrainCls,
    /// Write prediction CSVs for the evaluation split.
    Infer {
        /// Overrides the `mode` key.
        #[arg(long)]
        mode: Option<InferenceMode>,
    },
    /// Score predictions; also reports per-step DOA error and conditional accuracy.
    Eval {
        #[arg(long)]
        mode: Option<InferenceMode>,
        /// Directory of prediction CSVs (default: <output_dir>/pred_<mode>).
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        /// Skip the predictor-based step metrics.
        #[arg(long)]
        scores_only: bool,
    },
    /// Every stage in order, inference and scoring in both modes.
    RunAll,
    /// Print the resolved configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(n) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match cli.cmd {
        Cmd::Synth => {
            let m = synth(&cfg)?;
            eprintln!("synthesized {} scenes into {}", m.scenes.len(), cfg.data_dir.display());
        }
        Cmd::Features { force } => report_cache(&build_features(&cfg, force)?),
        Cmd::TrainLoc => {
            cmd_train(&cfg, Component::Localizer)?;
        }
        Cmd::TrainCls => {
            cmd_train(&cfg, Component::Classifier)?;
        }
        Cmd::Infer { mode } => {
            cmd_infer(&cfg, mode.unwrap_or(cfg.mode))?;
        }
        Cmd::Eval { mode, pred_dir, scores_only } => {
            cmd_eval(&cfg, mode.unwrap_or(cfg.mode), pred_dir.as_deref(), scores_only)?;
        }
        Cmd::RunAll => {
            cmd_run_all(&cfg)?;
        }
        Cmd::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
