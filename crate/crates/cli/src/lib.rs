//! Configuration handling and commands behind the `rsrlab` binary.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::{parse_config, RunConfig};

pub const SEED_ENV: &str = "RSRLAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "rsrlab", version, about = "Robust super-resolution: training, attacks and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct CommandArgs {
    /// Run configuration (`key = value` lines, optional [section] headers).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides as `--key value` or `--section.key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean pre-training (L1 warm-up, then relativistic GAN).
    Pretrain(CommandArgs),
    /// Robust fine-tuning with structured-noise PGD inputs.
    RobustTrain(CommandArgs),
    /// Write adversarial LR inputs for the evaluation set.
    Attack(CommandArgs),
    /// Metrics on clean and corrupted evaluation inputs.
    Eval(CommandArgs),
    /// Write corrupted copies of a folder of PNGs.
    Degrade(CommandArgs),
    /// Sweep attack hyper-parameters from one pre-trained checkpoint.
    Ablate(CommandArgs),
}

impl Command {
    fn args(&self) -> &CommandArgs {
        match self {
            Command::Pretrain(a)
            | Command::RobustTrain(a)
            | Command::Attack(a)
            | Command::Eval(a)
            | Command::Degrade(a)
            | Command::Ablate(a) => a,
        }
    }
}

/// Config file, then `RSRLAB_SEED`, then command-line overrides.
pub fn resolve_config(args: &CommandArgs, env_seed: Option<String>) -> Result<RunConfig> {
    let mut cfg = config::load_config(&args.config)?;
    if let Some(seed) = env_seed {
        cfg.seed = seed
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}='{seed}' is not an unsigned integer"))?;
    }
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    cfg.check_paths()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(cli.command.args(), std::env::var(SEED_ENV).ok())?;
    match cli.command {
        Command::Pretrain(_) => commands::cmd_pretrain(&cfg),
        Command::RobustTrain(_) => commands::cmd_robust_train(&cfg),
        Command::Attack(_) => commands::cmd_attack(&cfg),
        Command::Eval(_) => commands::cmd_eval(&cfg),
        Command::Degrade(_) => commands::cmd_degrade(&cfg),
        Command::Ablate(_) => commands::cmd_ablate(&cfg),
    }
    .map(|_| ())
}
