//! `xfer`: command-line driver for zero-shot domain transfer experiments.
//!
//! Every command works inside one experiment directory (`--out`). Data
//! commands write `world.json` and `data/*.jsonl`, training commands write
//! `checkpoints/*.ckpt` with a model-config sidecar, and evaluation commands
//! write JSON and CSV reports under `reports/`. Each JSON report carries the
//! hash of the exact config that produced it; `manifest.json` records the
//! hash for every file, including those whose format has no room for it.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "xfer", version, about = "Zero-shot domain transfer experiments on synthetic worlds")]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment directory.
    #[arg(long, global = true, default_value = "xfer-run")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Drop the in-domain MLM term.
    #[arg(long, global = true)]
    pub no_mlm: bool,
    /// Keep NLI as classification and summarisation as generation only.
    #[arg(long, global = true)]
    pub no_nlgu: bool,
    /// Train the generation directions only.
    #[arg(long, global = true)]
    pub no_nlu: bool,
    /// Skip self-finetuning; the pretrained model is carried forward.
    #[arg(long, global = true)]
    pub no_self_finetune: bool,
    /// MLM weight in the joint loss.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Understanding-direction weight in the task loss.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// In-domain MLM items per general task item.
    #[arg(long, global = true)]
    pub mix_ratio: Option<f64>,
    /// Model size: small, base or large.
    #[arg(long, global = true)]
    pub preset: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic world spec.
    GenWorld,
    /// Write the world and every dataset split.
    GenData,
    /// Continual multi-task pretraining from the warmed-up base model.
    Pretrain,
    /// Pseudo-NLI generation on target premises, then finetuning on it.
    SelfFinetune {
        /// Starting checkpoint; defaults to the pretrained one.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Contrastive finetuning of the encoder on generated pairs.
    EmbedFinetune {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// NLI, summarisation, retrieval and similarity metrics.
    Eval {
        /// Checkpoint to evaluate; defaults to the latest training stage.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Checkpoint for the embedding metrics; defaults to the
        /// embedding-finetuned one when present.
        #[arg(long)]
        embed_checkpoint: Option<PathBuf>,
    },
    /// Control-code attention probe.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Zero-rule baseline.
    Baseline,
    /// Collect every report into one table.
    Report,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<xfer_core::Error>() {
        return match e {
            xfer_core::Error::Text(_) => "text",
            xfer_core::Error::Model(_) => "model",
            xfer_core::Error::Objective(_) => "objective",
            xfer_core::Error::Datagen(_) => "datagen",
            xfer_core::Error::Pipeline(_) => "pipeline",
            xfer_core::Error::Metric(_) => "metric",
            xfer_core::Error::Analysis(_) => "analysis",
            xfer_core::Error::Config { .. } => "config",
            xfer_core::Error::File { .. } | xfer_core::Error::Io(_) => "io",
            xfer_core::Error::Json(_) => "json",
        };
    }
    if e.downcast_ref::<xfer_core::model::ModelError>().is_some() {
        return "model";
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::load(cli.config.as_deref(), cli.seed, &cli.overrides)
        .and_then(|cfg| commands::run(&cli.command, &cfg, &cli.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": { "kind": error_kind(&e), "message": format!("{e:#}") } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
