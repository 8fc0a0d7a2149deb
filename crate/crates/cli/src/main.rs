//! `agm`: train, sample, evaluate and inspect the phase-space bridge model.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use agm_core::{AgmError, ErrorClass, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::{Context, EvalArgs};
use crate::config::{RunConfig, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "agm", version, about = "Phase-space stochastic bridge generative model on toy data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Sectioned `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set grid.nfe=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set run.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `run.out_dir`, then the environment.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Worker cap, shorthand for `--set run.threads=N`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write SVG plots.
    #[arg(long, global = true)]
    plot: bool,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the force network and write a checkpoint and loss curve.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Draw samples from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Shorthand for `--set grid.nfe=N`.
        #[arg(long)]
        nfe: Option<usize>,
    },
    /// Compare samples with fresh draws from the dataset.
    Eval {
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        trajectories: Option<PathBuf>,
        /// Reference points instead of fresh dataset draws.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        label: String,
    },
    /// Dump the kernel over the time grid and the terminal spread over k.
    Inspect {
        /// Prior correlations for the terminal spread sweep.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-0.9,-0.6,-0.4,-0.2,0,0.2,0.4,0.6,0.9")]
        k: Vec<f64>,
    },
}

fn exit_code(e: &AgmError) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Numeric => 3,
        ErrorClass::Io => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let mut overrides = c.overrides;
    if let Some(s) = c.seed {
        overrides.push(format!("run.seed={s}"));
    }
    if let Some(t) = c.threads {
        overrides.push(format!("run.threads={t}"));
    }
    if let Command::Sample { nfe: Some(n), .. } = &cli.command {
        overrides.push(format!("grid.nfe={n}"));
    }
    let cfg = RunConfig::load(c.config.as_deref(), &overrides)?;
    let out = cfg.out_dir(c.out.as_deref());
    std::fs::create_dir_all(&out)?;
    log::debug!("config hash {}, output {}", cfg.hash(), out.display());
    let ctx = Context { cfg, out, plot: c.plot };
    match cli.command {
        Command::Train { resume } => commands::cmd_train(&ctx, resume),
        Command::Sample { checkpoint, .. } => commands::cmd_sample(&ctx, checkpoint.as_deref()),
        Command::Eval { samples, trajectories, reference, ledger, label } => {
            let args = EvalArgs { samples: samples.as_deref(), trajectories: trajectories.as_deref(), reference: reference.as_deref(), ledger: ledger.as_deref(), label: &label };
            commands::cmd_eval(&ctx, &args).map(|_| ())
        }
        Command::Inspect { k } => commands::cmd_inspect(&ctx, &k),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
