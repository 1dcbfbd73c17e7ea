//! `gduq`: generate synthetic graph data, train anchored and baseline
//! models, and evaluate calibration, OOD detection and generalization
//! error prediction.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gduq_core::anchoring::supervised_rows;
use gduq_core::experiment;
use gduq_core::Error;

#[derive(Parser)]
#[command(
    name = "gduq",
    version,
    about = "Stochastic anchoring experiments for graph neural networks"
)]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset described by the config's generator section.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output dataset file (line-delimited JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one checkpoint per (method, seed).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate checkpoints and write a JSON report plus a CSV next to it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Report path; the CSV goes to the same path with a `.csv` extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train vanilla, every hidden-layer anchor position and readout
    /// anchoring, and write accuracy and ECE per choice as CSV.
    SweepAnchorLayer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out } => {
            let data = experiment::cmd_gen(&common.config, &out)?;
            let size =
                |gs: &[gduq_core::graph::Graph]| -> usize { gs.iter().map(|g| supervised_rows(g).0.len()).sum() };
            println!(
                "train {}  id_val {}  id_test {}  ood_test {}",
                size(&data.train),
                size(&data.id_val),
                size(&data.id_test),
                size(&data.ood_test)
            );
            log::info!("wrote {}", out.display());
        }
        Command::Train {
            common,
            data,
            out,
            jobs,
        } => {
            let cells = experiment::cmd_train(&common.config, &data, &out, jobs.max(1))?;
            log::info!("wrote {} checkpoint(s) under {}", cells.len(), out.display());
        }
        Command::Eval {
            common,
            data,
            ckpt,
            out,
            jobs,
        } => {
            let report = experiment::cmd_eval(&common.config, &data, &ckpt, &out, jobs.max(1))?;
            for s in report.summary.iter().filter(|s| s.split == "ood_test") {
                log::info!(
                    "{:<24} {:<12} ood acc {:.3} ± {:.3}  ece {:.3} ± {:.3}",
                    s.method.to_string(),
                    s.posthoc.as_str(),
                    s.accuracy.mean,
                    s.accuracy.std,
                    s.ece.mean,
                    s.ece.std
                );
            }
            log::info!("wrote {}", out.display());
        }
        Command::SweepAnchorLayer {
            common,
            data,
            out,
            jobs,
        } => {
            let rows = experiment::cmd_sweep_anchor_layer(&common.config, &data, &out, jobs.max(1))
                .with_context(|| "anchor-layer sweep failed")?;
            log::info!("wrote {} row(s) to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(
            Error::Data { .. }
            | Error::InvalidInput(_)
            | Error::Shape { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Json(_)
            | Error::Io(_),
        ) => 3,
        Some(Error::MissingArtifact(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
