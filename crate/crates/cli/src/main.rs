use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use atas_core::experiment::{compare, load_config, run, ExperimentConfig, Kind};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atas", version, about = "Adversarial training and minimax experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory with dataset files.
    #[arg(long, env = "ATAS_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate; overrides `eval.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and write per-epoch metrics.
    Train(Common),
    /// Evaluate a checkpoint under clean, FGSM and PGD attacks.
    Eval(EvalArgs),
    /// Run SGDBCA or ASGDBCA on a synthetic saddle problem.
    Saddle(Common),
    /// Train, then profile gradient norms and optionally retrain on a decile subset.
    Diagnose(Common),
    /// Evaluate the loss surface around the leading examples.
    ProbeSurface(EvalArgs),
    /// Compare one metric between two run directories.
    Compare {
        dir_a: PathBuf,
        dir_b: PathBuf,
        #[arg(long, default_value = "train_robust_loss")]
        metric: String,
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
        /// Compare the common prefix when the runs differ in length.
        #[arg(long)]
        truncate: bool,
    },
}

fn execute(kind: Kind, common: Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let (mut cfg, text) = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            (load_config(path)?, Some(text))
        }
        None => (ExperimentConfig::default(), None),
    };
    cfg.kind = kind;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = common.out {
        cfg.out = out;
    }
    if checkpoint.is_some() {
        cfg.eval.checkpoint = checkpoint;
    }
    let out = run(&cfg, text.as_deref(), common.data_dir.as_deref()).with_context(|| format!("{kind:?} run"))?;
    println!("{}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => execute(Kind::Train, c, None),
        Command::Eval(e) => execute(Kind::Eval, e.common, e.checkpoint),
        Command::Saddle(c) => execute(Kind::Saddle, c, None),
        Command::Diagnose(c) => execute(Kind::Diagnose, c, None),
        Command::ProbeSurface(e) => execute(Kind::ProbeSurface, e.common, e.checkpoint),
        Command::Compare {
            dir_a,
            dir_b,
            metric,
            tolerance,
            truncate,
        } => {
            let report = compare(Path::new(&dir_a), Path::new(&dir_b), &metric, tolerance, truncate)?;
            print!("{}", report.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
