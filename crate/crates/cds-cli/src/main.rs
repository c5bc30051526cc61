use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cds_cli::commands::{self, ResumeArgs};
use cds_cli::config::ExperimentConfig;
use cds_cli::error::AppError;

/// Cross-domain self-supervised pretraining and adaptation on two-domain
/// data: generate a task, pretrain the encoder, adapt a classifier with few
/// source labels, and measure feature quality.
#[derive(Parser)]
#[command(name = "cds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (one JSON document drives everything).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace every seed in the config with this value.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset CSVs and the split manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: self-supervised pretraining; writes model, banks, optimizer
    /// state, and the per-epoch loss CSV.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from a saved model instead of a fresh initialization.
        #[arg(long)]
        resume_model: Option<PathBuf>,
        #[arg(long)]
        resume_source_bank: Option<PathBuf>,
        #[arg(long)]
        resume_target_bank: Option<PathBuf>,
        /// Momentum buffers from the interrupted run; omitting them restarts
        /// momentum at zero.
        #[arg(long)]
        resume_optimizer: Option<PathBuf>,
        /// Epoch index the resumed run starts at.
        #[arg(long, default_value_t = 0)]
        resume_epoch: usize,
    },
    /// Stage 2: train the classifier with few source labels; writes the
    /// adapted model, head, epoch CSV, and summary.
    Adapt {
        #[command(flatten)]
        common: Common,
    },
    /// Feature-quality report (kNN, linear probe, retrieval, confusion) from
    /// a model or from raw feature CSVs.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// All four ablation arms over the seed list, with identical adaptation
    /// and evaluation per arm; writes the comparison table.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, AppError> {
    let text = std::fs::read_to_string(&common.config).map_err(AppError::io(&common.config))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = common.seed_override {
        cfg.override_seeds(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), AppError> {
    match &cli.command {
        Command::GenData { common } => {
            let cfg = load_config(common)?;
            commands::cmd_gen_data(&cfg, &common.out)
        }
        Command::Pretrain {
            common,
            resume_model,
            resume_source_bank,
            resume_target_bank,
            resume_optimizer,
            resume_epoch,
        } => {
            let cfg = load_config(common)?;
            let resume = ResumeArgs {
                model: resume_model.clone(),
                source_bank: resume_source_bank.clone(),
                target_bank: resume_target_bank.clone(),
                optimizer: resume_optimizer.clone(),
                epoch: *resume_epoch,
            };
            commands::cmd_pretrain(&cfg, &common.out, &resume)
        }
        Command::Adapt { common } => {
            let cfg = load_config(common)?;
            commands::cmd_adapt(&cfg, &common.out)
        }
        Command::Eval { common } => {
            let cfg = load_config(common)?;
            commands::cmd_eval(&cfg, &common.out)
        }
        Command::Pipeline { common } => {
            let cfg = load_config(common)?;
            commands::cmd_pipeline(&cfg, &common.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CDS_LOG", "error")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
