//! semnav: learn grid-navigation costs from demonstrations with semantic
//! observations.
//!
//! Subcommands: `gen`, `train`, `eval`, `rollout`, `validate`. Each takes a
//! TOML config file (unknown keys rejected) plus flag overrides.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 validation failure,
//! 3 training stopped at the epoch limit without converging.

mod config;

use clap::{Args, Parser, Subcommand};
use config::FileConfig;
use semnav::learner::TrainConfig;
use semnav::metrics::EvalOptions;
use semnav::pipeline;
use semnav::semantic_map::EncoderMode;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "semnav", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long)]
    threads: Option<usize>,
    /// Map update policy: endpoint cells only, or full rays.
    #[arg(long)]
    endpoint_only: Option<bool>,
    /// Inverse observation model.
    #[arg(long, value_parser = parse_encoder)]
    encoder: Option<EncoderMode>,
    /// Boltzmann policy temperature.
    #[arg(long)]
    temperature: Option<f64>,
}

fn parse_encoder(s: &str) -> Result<EncoderMode, String> {
    match s {
        "linear" => Ok(EncoderMode::Linear),
        "network" => Ok(EncoderMode::Network),
        other => Err(format!("unknown encoder {other:?} (linear|network)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of environments and expert demonstrations.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train cost parameters on a dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Training log output path (line-delimited records).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset: NLL, Acc, success rate, MHD.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Machine-readable report output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out the learned policy on one dataset item.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Demo id within the dataset.
        #[arg(long, default_value_t = 0)]
        demo_id: u32,
        /// Trajectory output file (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-step posterior and cost CSV grids.
        #[arg(long)]
        export_dir: Option<PathBuf>,
    },
    /// Check every environment and demonstration invariant in a dataset.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are exit code 1 regardless of clap's default.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn run(cli: Cli) -> Result<u8, String> {
    match cli.command {
        Command::Gen { common, out } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let mut gen_cfg = file.gen_config();
            if let Some(seed) = common.seed {
                gen_cfg.seed = seed;
            }
            let summary = pipeline::gen_dataset(&out, &gen_cfg).map_err(|e| e.to_string())?;
            println!(
                "wrote {} environments, {} demos ({} steps) to {}",
                summary.environments,
                summary.demos,
                summary.total_steps,
                summary.out_dir.display()
            );
            Ok(EXIT_OK)
        }
        Command::Train {
            common,
            dataset,
            out,
            log,
        } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let encoder = file.encoder_config(&common);
            let mut train_cfg: TrainConfig = file.train_config();
            apply_common_train(&mut train_cfg, &common);
            let outcome =
                pipeline::train_run(&dataset, &out, log.as_deref(), &encoder, &train_cfg)
                    .map_err(|e| e.to_string())?;
            let last = outcome.result.log.last();
            println!(
                "trained {} epochs (converged={}), final mean NLL {:.4}, Acc {:.1}%",
                outcome.result.epochs_run,
                outcome.result.converged,
                last.map_or(f64::NAN, |r| r.mean_nll),
                100.0 * last.map_or(f64::NAN, |r| r.accuracy),
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
            if outcome.result.converged {
                Ok(EXIT_OK)
            } else {
                Ok(EXIT_NO_CONVERGENCE)
            }
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            out,
        } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let opts: EvalOptions = file.eval_options(&common);
            let report = pipeline::eval_run(&dataset, &checkpoint, out.as_deref(), &opts)
                .map_err(|e| e.to_string())?;
            print!("{report}");
            Ok(EXIT_OK)
        }
        Command::Rollout {
            common,
            dataset,
            checkpoint,
            demo_id,
            out,
            export_dir,
        } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let opts = file.eval_options(&common);
            let report = pipeline::rollout_run(
                &dataset,
                demo_id,
                &checkpoint,
                &out,
                export_dir.as_deref(),
                &opts,
            )
            .map_err(|e| e.to_string())?;
            println!(
                "outcome: {:?} in {} steps (expert {}), MHD to expert {:.3}",
                report.outcome, report.steps, report.expert_steps, report.mhd_to_expert
            );
            Ok(EXIT_OK)
        }
        Command::Validate { common: _, dataset } => {
            let report = pipeline::validate_run(&dataset).map_err(|e| e.to_string())?;
            if report.ok() {
                println!("ok: {} demo/environment pairs valid", report.checked);
                Ok(EXIT_OK)
            } else {
                for error in &report.errors {
                    eprintln!("invalid: {error}");
                }
                eprintln!("{} violations in {} pairs", report.errors.len(), report.checked);
                Ok(EXIT_VALIDATION)
            }
        }
    }
}

fn apply_common_train(cfg: &mut TrainConfig, common: &Common) {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    if let Some(temperature) = common.temperature {
        cfg.temperature = temperature;
    }
}
