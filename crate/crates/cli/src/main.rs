mod artifacts;
mod compare;
mod diagnose;
mod grid;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use dfcil_core::config::ExperimentConfig;
use dfcil_core::data::DATA_ROOT_ENV;

use crate::run::RunOptions;

/// Data-free class-incremental learning experiments.
#[derive(Debug, Parser)]
#[command(name = "dfcil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every trial of a configuration and write its run directory.
    Run(RunArgs),
    /// Tabulate A_N and Ω of finished runs, one row per method.
    Compare {
        /// Run directories (at least two).
        dirs: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Representational drift between two tasks from retained checkpoints.
    Diagnose {
        /// Run directory created with --checkpoint-every-task.
        run: PathBuf,
        /// 1-based task pair `a,b` with a < b.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2])]
        tasks: Vec<usize>,
        /// Trial seed; the run's first seed by default.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train only the offline upper bound used to normalize Ω.
    UpperBound(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Config file, or a preset such as `toy_ours_4task`.
    #[arg(long)]
    config: String,
    /// Output directory (default: `runs/<preset-style name>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// First trial seed; trials use consecutive seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// CIFAR-100 directory when the config sets none.
    #[arg(long, env = DATA_ROOT_ENV, hide_env_values = true)]
    data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Keep the model (and coreset) after every task.
    #[arg(long)]
    checkpoint_every_task: bool,
    /// Save a PNG grid of synthetic replay images per task.
    #[arg(long)]
    dump_synth_grid: bool,
    /// Continue an interrupted run in the same output directory.
    #[arg(long)]
    resume: bool,
}

impl CommonArgs {
    fn load(&self) -> Result<(ExperimentConfig, RunOptions)> {
        let mut cfg = ExperimentConfig::resolve(&self.config)?;
        if cfg.data_root.is_none() {
            cfg.data_root = self.data_root.clone();
        }
        let opts = RunOptions {
            out: self.out.clone(),
            seed: self.seed,
            trials: self.trials,
            ..RunOptions::default()
        };
        Ok((cfg, opts))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, mut opts) = args.common.load()?;
            opts.checkpoint_every_task = args.checkpoint_every_task;
            opts.dump_synth_grid = args.dump_synth_grid;
            opts.resume = args.resume;
            let out = run::run(cfg, &opts)?;
            eprintln!("run directory: {}", out.display());
        }
        Command::Compare { dirs, out } => {
            print!("{}", compare::compare(&dirs, out.as_deref())?);
        }
        Command::Diagnose { run, tasks, seed, out } => {
            let [a, b] = tasks[..] else {
                bail!("--tasks takes exactly two task numbers");
            };
            let dir = diagnose::diagnose(&run, (a, b), seed, out.as_deref())?;
            eprintln!("drift report: {}", dir.display());
        }
        Command::UpperBound(common) => {
            let (cfg, opts) = common.load()?;
            let out = run::upper_bound(cfg, &opts)?;
            eprintln!("run directory: {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
