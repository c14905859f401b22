//! `abstain`: train, certify, attack, and sweep multi-abstain classifiers.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "abstain", version, about = "Certifiably robust classifiers with multiple abstain classes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on a dataset and write its weights and metrics log.
    Train(commands::TrainArgs),
    /// Certify every sample of a dataset and write a JSONL report.
    Verify(commands::VerifyArgs),
    /// Run PGD attacks against a dataset, optionally cross-checking a report.
    AttackAudit(commands::AttackArgs),
    /// Sweep abstain-class counts (and the merged depth variant) into a CSV.
    Compare(commands::CompareArgs),
    /// Print the one-dimensional detection example table.
    Demo(commands::DemoArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => commands::run_train(args),
        Command::Verify(args) => commands::run_verify(args),
        Command::AttackAudit(args) => commands::run_attack(args),
        Command::Compare(args) => commands::run_compare(args),
        Command::Demo(args) => commands::run_demo(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
