use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stpredict::commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_meta_train, cmd_params, cmd_train, ExperimentConfig, Split,
};

/// Spatiotemporal CSI forecasting: data generation, training, evaluation.
///
/// Results go to stdout as JSON, progress to stderr. Exit codes: 0 success,
/// 2 configuration error, 3 data error, 4 numeric abort.
#[derive(Parser)]
#[command(name = "stpredict", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scenario and store its preprocessed splits.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override `train.iters`.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Teacher/student training with pseudo labels.
    MetaTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the similarity-weighted labeled loss.
        #[arg(long)]
        adaptive: bool,
        /// Override `train.iters`.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Score a checkpoint on a stored dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Check the checkpoint against this config's model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Train and score the ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP counts of the configured model.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load(path: &Path, iters: Option<usize>) -> stpredict::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(n) = iters {
        cfg.train.iters = n;
    }
    Ok(cfg)
}

fn emit<S: Serialize>(value: &S) -> stpredict::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> stpredict::Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => emit(&cmd_gen_data(&load(&config, None)?, &out)?),
        Cmd::Train { config, data, out, iters } => emit(&cmd_train(&load(&config, iters)?, &data, &out)?),
        Cmd::MetaTrain {
            config,
            labeled,
            unlabeled,
            out,
            adaptive,
            iters,
        } => emit(&cmd_meta_train(&load(&config, iters)?, &labeled, &unlabeled, &out, adaptive)?),
        Cmd::Eval {
            checkpoint,
            data,
            out,
            config,
            split,
        } => {
            let cfg = config.map(|p| load(&p, None)).transpose()?;
            emit(&cmd_eval(&checkpoint, &data, cfg.as_ref(), split.into(), out.as_deref())?)
        }
        Cmd::Ablate { config, out } => emit(&cmd_ablate(&load(&config, None)?, &out)?),
        Cmd::Params { config } => emit(&cmd_params(&load(&config, None)?)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
