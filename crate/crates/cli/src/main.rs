//! `packtrain` runs profile, tune and simulate experiments from a TOML spec.
//!
//! Exit codes: 0 success, 2 spec error, 3 a single model does not fit the
//! device, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use packtrain::experiment::{ExperimentSpec, Overrides};
use packtrain::ExperimentError;

#[derive(Debug, Parser)]
#[command(name = "packtrain", version, about = "Packed-training experiments: profile, tune, simulate")]
struct Args {
    /// Experiment spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Replaces the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Builtin profile name or profile file; replaces the spec's device.
    #[arg(long)]
    device: Option<String>,
    /// Report destination; stdout when neither this nor the spec sets one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this tuning strategy.
    #[arg(long, value_parser = ["original", "batchsize", "random", "knn"])]
    strategy: Option<String>,
    #[arg(long, value_parser = ["indexsum", "euclid", "traintime"])]
    metric: Option<String>,
    /// kNN distance threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

fn run(args: Args) -> Result<(), ExperimentError> {
    let mut spec = ExperimentSpec::from_path(&args.spec)?;
    let cwd = std::env::current_dir().map_err(|e| ExperimentError::Io(e.to_string()))?;
    spec.apply(&Overrides {
        seed: args.seed,
        device: args.device.map(|d| if cwd.join(&d).is_file() { cwd.join(d).display().to_string() } else { d }),
        out: args.out.map(|o| cwd.join(o)),
        strategy: args.strategy,
        metric: args.metric,
        threshold: args.threshold,
    });
    let text = spec.execute()?;
    if spec.out.is_none() {
        print!("{text}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("packtrain: {e}");
            ExitCode::from(match e {
                ExperimentError::Spec { .. } => 2,
                ExperimentError::OutOfMemory(_) => 3,
                ExperimentError::Io(_) => 1,
            })
        }
    }
}
