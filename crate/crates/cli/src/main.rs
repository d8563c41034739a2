use std::path::PathBuf;
use std::process::ExitCode;

use ape_cli::commands::{self, Context};
use ape_cli::config::ExperimentConfig;
use ape_cli::CliError;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ape", version, about = "Anatomical positional embeddings on synthetic phantoms")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for all outputs.
    #[arg(long, global = true, default_value = "ape_out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the phantom dataset and its index.
    Generate,
    /// Train a model on the training split.
    Train {
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Embed every evaluation phantom with sliding-window inference.
    Embed,
    /// Landmark retrieval over all ordered pairs of evaluation phantoms.
    EvalRetrieval,
    /// Few-shot organ localization with cross-validation folds.
    EvalLocalization,
    /// Organ-center embeddings and cluster statistics.
    ExportCenters,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let ctx = Context { cfg, out: cli.out };
    match cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Train { resume } => commands::train(&ctx, resume),
        Command::Embed => commands::embed(&ctx),
        Command::EvalRetrieval => commands::eval_retrieval(&ctx),
        Command::EvalLocalization => commands::eval_localization(&ctx),
        Command::ExportCenters => commands::export_centers(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
