use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use codistill_cli::{cmd_eval, cmd_gen_data, cmd_sweep, cmd_train, cmd_verify, Axis, ExperimentConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "codistill", version, about = "Train and evaluate multi-headed ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train this seed only (overrides output.seeds).
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV table to score instead of the checkpoint's holdout split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for eval.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train across values of lambda or mu and aggregate over seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values, e.g. 0,2,3.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the numerical self-checks.
    Verify {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the configured synthetic data as CSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Destination CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    if let Some(s) = seed {
        cfg.output.seeds = vec![s];
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            resume,
            stop_after,
        } => {
            let cfg = load(&config, out, seed)?;
            cmd_train(&cfg, &TrainOptions { resume, stop_after })?;
        }
        Command::Eval { checkpoint, data, out } => {
            cmd_eval(&checkpoint, data.as_deref(), out.as_deref())?;
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            seed,
        } => {
            let cfg = load(&config, out, seed)?;
            cmd_sweep(&cfg, axis, &values)?;
        }
        Command::Verify { trials, seed } => {
            cmd_verify(trials, seed)?;
        }
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let n = cmd_gen_data(&cfg, &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
