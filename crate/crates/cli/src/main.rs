mod commands;
mod config;
mod error;
mod inputs;
mod report;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CompareArgs, CostArgs, GenArgs, PropagateArgs, RunCmdArgs, SweepArgs, ValidateArgs};

/// Position-decayed, output-aware block-sparse attention on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "stem", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic Q/K/V tensors and print a manifest
    Gen(GenArgs),
    /// Run sparse attention and report budget, cost and error against dense
    Run(RunCmdArgs),
    /// Token-level SAM vs OAM selection error and bound over seeds
    Compare(CompareArgs),
    /// Sweep mu or beta and tabulate error, budget and cost
    Sweep(SweepArgs),
    /// Prune token segments in a toy transformer and measure the damage
    Propagate(PropagateArgs),
    /// Closed-form and enumerated cost of a decaying budget
    Cost(CostArgs),
    /// Run the invariant suite; exits 2 if any check fails
    Validate(ValidateArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(error::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Run(a) => commands::run(a),
        Command::Compare(a) => commands::compare(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Propagate(a) => commands::propagate(a),
        Command::Cost(a) => commands::cost(a),
        Command::Validate(a) => commands::validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
