//! `dufm-lab`: command-line front end to the dufm-core laboratory.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use commands::{
    CliError, CompareArgs, ConstructArgs, DimsArgs, HessianArgs, MetricsArgs, SpectrumSweepArgs, SweepArgs,
    ThresholdsArgs, TrainArgs,
};

/// Numerical experiments on deep unconstrained feature models.
///
/// Every subcommand accepts `--config file.json` whose keys mirror the long
/// flag names; flags given on the command line take precedence. Grids accept
/// inclusive ranges `a..b` and comma lists. Without `--out`, outputs go to
/// `$DUFM_LAB_OUT` or the working directory.
#[derive(Parser, Debug)]
#[command(name = "dufm-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a closed-form parameter stack and save it.
    Construct(ConstructArgs),
    /// Train a model with full-batch gradient descent.
    Train(TrainArgs),
    /// Train over a grid of widths, strengths, learning rates and seeds.
    Sweep(SweepArgs),
    /// Rank output structures by their optimally scaled reduced loss.
    Compare(CompareArgs),
    /// Eigenvalue summary of the linear cross-entropy Hessian.
    Hessian(HessianArgs),
    /// Minimize the reduced objective across depths and track its spectrum.
    SpectrumSweep(SpectrumSweepArgs),
    /// Solution-space dimension counts over a range of widths.
    Dims(DimsArgs),
    /// Evaluate a closed-form threshold inequality over a (K, L) grid.
    Thresholds(ThresholdsArgs),
    /// Collapse metrics of a saved parameter stack.
    Metrics(MetricsArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::Construct(_) => "construct",
        Command::Train(_) => "train",
        Command::Sweep(_) => "sweep",
        Command::Compare(_) => "compare",
        Command::Hessian(_) => "hessian",
        Command::SpectrumSweep(_) => "spectrum-sweep",
        Command::Dims(_) => "dims",
        Command::Thresholds(_) => "thresholds",
        Command::Metrics(_) => "metrics",
    };
    let result = match cli.command {
        Command::Construct(a) => commands::construct(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Sweep(a) => commands::sweep_cmd(a),
        Command::Compare(a) => commands::compare_cmd(a),
        Command::Hessian(a) => commands::hessian_cmd(a),
        Command::SpectrumSweep(a) => commands::spectrum_sweep_cmd(a),
        Command::Dims(a) => commands::dims_cmd(a),
        Command::Thresholds(a) => commands::thresholds_cmd(a),
        Command::Metrics(a) => commands::metrics_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e}\n");
            let mut cmd = Cli::command();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("{}", sub.render_usage());
            }
            eprintln!("For more information, try 'dufm-lab {name} --help'.");
            ExitCode::from(2)
        }
        Err(CliError::Lab(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
