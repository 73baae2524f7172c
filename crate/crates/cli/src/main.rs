//! `gencopy`: train, generate, evaluate and gradient-check copy-augmented
//! seq2seq models.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration or input error,
//! 3 numeric failure during training, 4 incompatible checkpoint, 5 misaligned
//! files, 6 failed gradient verification. Logs go to stderr; set `RUST_LOG`
//! to change the level (default `info`).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gencopy_core::data::DataError;
use gencopy_core::decoding::DecodeError;
use gencopy_core::network::NetworkError;
use gencopy_core::tensor::BackwardFault;
use gencopy_core::training::{CheckpointError, TrainError};

use commands::Weights;
use config::{Overrides, RunConfig};

const OUTPUT_DIR_ENV: &str = "GENCOPY_OUTPUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("misaligned inputs: {0}")]
    Alignment(String),
    #[error("gradient check failed:\n{0}")]
    Verification(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Compatibility(_) => 4,
            CliError::Alignment(_) => 5,
            CliError::Verification(_) => 6,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Alignment { .. } => CliError::Alignment(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Config(e.to_string()),
            _ => CliError::Compatibility(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::EmptyData(_) => CliError::Config(e.to_string()),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Structure(_) => CliError::Compatibility(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Config(_) => CliError::Config(e.to_string()),
            DecodeError::Alignment { .. } => CliError::Alignment(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "gencopy", version, about = "Copy-augmented sequence-to-sequence generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.max_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, seeds: Option<Vec<u64>>, output_dir: Option<PathBuf>) -> Result<RunConfig, CliError> {
        let env_dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
        let cli = Overrides {
            sets: self.sets.clone(),
            seeds,
            output_dir,
        };
        RunConfig::load(&self.config, env_dir, &cli)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Size {
    Small,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed; writes seed-<n>.ckpt (selected) and
    /// seed-<n>.last.ckpt (final state) to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds, replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory (overrides the config and GENCOPY_OUTPUT_DIR).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Decode every input record or question with a trained checkpoint.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `.box` lines (table2text) or SQuAD JSON (qg).
        #[arg(long)]
        input: PathBuf,
        /// One generated sequence per line.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "ema")]
        weights: Weights,
    },
    /// Score hypotheses against references (one tokenized sentence per line)
    /// and aggregate across seeds.
    Evaluate {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: Vec<PathBuf>,
        /// Glob matching one hypothesis file per seed, e.g. `runs/hyp-seed*.txt`.
        #[arg(long)]
        seed_glob: Option<String>,
        /// Directory for eval.txt and eval.json.
        #[arg(long, env = OUTPUT_DIR_ENV, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Finite-difference check of every parameter group of toy models for
    /// both tasks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "small")]
        size: Size,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Probed coordinates per parameter tensor.
        #[arg(long, default_value_t = 20)]
        probes: usize,
        /// Scale the backward rule of one op (`tanh` or `tanh:1.5`); used to
        /// show the check catches broken gradients.
        #[arg(long, hide = true, value_parser = commands::parse_fault)]
        fault: Option<BackwardFault>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            seeds,
            output_dir,
        } => commands::train(&config.resolve(seeds, output_dir)?),
        Command::Generate {
            config,
            checkpoint,
            input,
            output,
            weights,
        } => commands::generate_file(&config.resolve(None, None)?, &checkpoint, &input, &output, weights).map(drop),
        Command::Evaluate {
            refs,
            hyps,
            seed_glob,
            out_dir,
        } => {
            let files = commands::hypothesis_files(&hyps, seed_glob.as_deref())?;
            print!("{}", commands::evaluate(&refs, &files, &out_dir)?);
            Ok(())
        }
        Command::Gradcheck {
            size: Size::Small,
            seed,
            probes,
            fault,
        } => {
            print!("{}", commands::gradcheck(seed, probes, fault)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
