//! Command-line entry point. Every subcommand takes a run config file;
//! `--seed` and `--out` override the corresponding config values.
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use clap::{Parser, Subcommand};
use drmflow_core::config::{Experiment, ExperimentConfig};
use drmflow_core::error::Error;
use drmflow_core::harness::run_experiment;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "drmflow",
    about = "Flow-matching training, reward modeling, alignment, and sampling",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Parser)]
struct RunArgs {
    /// Run config file (flat key=value, dotted sections).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the flow-matching velocity field.
    FmTrain(RunArgs),
    /// Train the reward model on preference pairs.
    DrmTrain(RunArgs),
    /// Align the sampler with GRPO or Step-GRPO.
    Align(RunArgs),
    /// Run the reward-guided sampling sweep over k.
    Sample(RunArgs),
    /// Evaluate the reward model (noise-level accuracy or init ablation).
    Eval(RunArgs),
    /// Run the GRPO vs Step-GRPO convergence comparison report.
    Report(RunArgs),
}

/// Experiments each subcommand accepts.
fn allowed(cmd: &Command) -> &'static [Experiment] {
    match cmd {
        Command::FmTrain(_) => &[Experiment::FmTrain],
        Command::DrmTrain(_) => &[Experiment::DrmTrain],
        Command::Align(_) => &[Experiment::Align],
        Command::Sample(_) => &[Experiment::SampleSweep],
        Command::Eval(_) => &[Experiment::NoiseEval, Experiment::InitAblation],
        Command::Report(_) => &[Experiment::ConvergenceCompare],
    }
}

fn args(cmd: &Command) -> &RunArgs {
    match cmd {
        Command::FmTrain(a)
        | Command::DrmTrain(a)
        | Command::Align(a)
        | Command::Sample(a)
        | Command::Eval(a)
        | Command::Report(a) => a,
    }
}

fn run(cmd: &Command) -> Result<(), Error> {
    let a = args(cmd);
    let mut ec = ExperimentConfig::load(&a.config)?;
    if !allowed(cmd).contains(&ec.experiment) {
        return Err(Error::Config(format!(
            "experiment `{}` does not belong to this subcommand",
            ec.experiment.name()
        )));
    }
    if let Some(seed) = a.seed {
        ec.seed = seed;
    }
    if let Some(out) = &a.out {
        ec.out_dir = out.clone();
    }
    let manifest = run_experiment(&ec)?;
    println!(
        "{}: wrote {} outputs to {}",
        manifest.experiment,
        manifest.outputs.len(),
        ec.out_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    // Usage problems are configuration errors: exit 1, not clap's default 2.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.exit_code() == 0 { 0 } else { 1 });
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::InvalidArgument(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
