//! `voxreg`: residualize targets, train the two ensemble members, weight
//! them, evaluate and predict, generate synthetic data and run the built-in
//! oracle suite.

mod commands;
mod run_config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{EnsembleArgs, EvalArgs, RerunArgs, ResidualizeArgs, SelfcheckArgs, SynthArgs, TrainArgs};

const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "voxreg", version, about = "Volumetric CNN regression of cognitive scores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the confound model and write residualized targets.
    Residualize(ResidualizeArgs),
    /// Train the two ensemble members on disjoint halves of the training set.
    Train(TrainArgs),
    /// Weight trained members by their validation scores.
    Ensemble(EnsembleArgs),
    /// Predict and report the MSE against residualized targets.
    Evaluate(EvalArgs),
    /// Predict; the MSE is printed only when every subject has a target.
    Predict(EvalArgs),
    /// Generate a synthetic dataset with a planted signal.
    Synth(SynthArgs),
    /// Run the gradient and loop-oracle checks.
    Selfcheck(SelfcheckArgs),
    /// Repeat the run recorded in a directory's run_config.txt.
    Rerun(RerunArgs),
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("VOXREG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| voxreg::Error::Config(format!("VOXREG_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| voxreg::Error::Config(format!("cannot size the thread pool: {e}")))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<voxreg::Error>()) else {
        return 1;
    };
    match e {
        voxreg::Error::Config(_) => EXIT_CONFIG,
        voxreg::Error::Numeric(_) => EXIT_NUMERIC,
        voxreg::Error::Data(_)
        | voxreg::Error::Volume { .. }
        | voxreg::Error::Checkpoint { .. }
        | voxreg::Error::Io { .. } => EXIT_DATA,
        voxreg::Error::Internal(_) => 1,
    }
}

/// Parses and runs one command line (without the program name).
fn run(argv: Vec<String>) -> Result<(), Outcome> {
    let cli = Cli::try_parse_from(std::iter::once("voxreg".to_string()).chain(argv.iter().cloned()))
        .map_err(Outcome::Usage)?;
    let result = match cli.command {
        Command::Residualize(a) => commands::residualize(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Ensemble(a) => commands::ensemble(&a, &argv),
        Command::Evaluate(a) => commands::evaluate(&a, true, &argv),
        Command::Predict(a) => commands::evaluate(&a, false, &argv),
        Command::Synth(a) => commands::synth(&a, &argv),
        Command::Selfcheck(a) => commands::selfcheck(&a),
        Command::Rerun(a) => {
            let (cwd, replay) = commands::rerun_argv(&a).map_err(Outcome::Failed)?;
            std::env::set_current_dir(&cwd)
                .map_err(|e| Outcome::Failed(voxreg::Error::Io { path: cwd, source: e }.into()))?;
            return run(replay);
        }
    };
    result.map_err(Outcome::Failed)
}

enum Outcome {
    Usage(clap::Error),
    Failed(anyhow::Error),
}

fn main() -> ExitCode {
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(exit_code(&e));
    }
    match run(std::env::args().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Outcome::Usage(e)) => {
            let _ = e.print();
            if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(Outcome::Failed(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
