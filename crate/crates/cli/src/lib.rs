//! Command-line driver for the prune / train / search pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod workdir;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{Ctx, Which};
use crate::config::PipelineConfig;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "shears", version, about = "Prune a base model, train an elastic adapter, search sub-adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// TOML config; every field has a default.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a field by dotted path, e.g. `prune.sparsity=0.7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Replace every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate and prune the base model into `model/`.
    Prune(Common),
    /// Train the super-adapter on the frozen base into `adapter/`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Skip pruning: write an unpruned frozen base first.
        #[arg(long)]
        dense: bool,
    },
    /// Search sub-adapter configs on the validation split.
    Search(Common),
    /// Test-split accuracy of the base or one sub-adapter.
    Eval {
        #[command(flatten)]
        common: Common,
        /// base, heuristic, maximal, minimal, best, or `module=rank,...`.
        #[arg(long, default_value = "best")]
        which: String,
    },
    /// Dense vs CSR forward timing.
    Bench(Common),
    /// Parameter and sparsity accounting, unmerged and merged.
    Report(Common),
    /// prune, train, search, eval and report in one go.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dense: bool,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prune(c) | Command::Search(c) | Command::Bench(c) | Command::Report(c) => c,
            Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Pipeline { common, .. } => common,
        }
    }
}

pub fn load_config(common: &Common) -> CliResult<PipelineConfig> {
    let mut cfg = PipelineConfig::load(common.config.as_deref(), &common.set)?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

/// Runs one command with the workdir locked.
pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(cli.command.common())?;
    let ctx = Ctx::new(cfg);
    let _lock = ctx.wd.lock()?;
    match &cli.command {
        Command::Prune(_) => commands::cmd_prune(&ctx).map(drop),
        Command::Train { dense, .. } => commands::cmd_train(&ctx, *dense).map(drop),
        Command::Search(_) => commands::cmd_search(&ctx).map(drop),
        Command::Eval { which, .. } => commands::cmd_eval(&ctx, &Which::parse(which)?).map(drop),
        Command::Bench(_) => commands::cmd_bench(&ctx).map(drop),
        Command::Report(_) => commands::cmd_report(&ctx).map(drop),
        Command::Pipeline { dense, .. } => commands::cmd_pipeline(&ctx, *dense).map(drop),
    }
}
