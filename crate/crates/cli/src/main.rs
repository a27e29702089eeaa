use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use vra_kit::{Command, Flags};

/// Post-hoc OOD detection on exported penultimate features.
#[derive(Parser)]
#[command(name = "vra-kit", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Score ID and OOD sets and report FPR95 / AUROC.
    Eval(Flags),
    /// Grid-search VRA thresholds on the validation set.
    Tune(Flags),
    /// Export g* tables and the gap-bound record.
    Gstar(Flags),
    /// Evaluate g* rectifiers fit on the evaluation data itself.
    Oracle(Flags),
    /// Generate a synthetic feature benchmark.
    Synth(Flags),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let (command, flags) = match cli.command {
        Sub::Eval(f) => (Command::Eval, f),
        Sub::Tune(f) => (Command::Tune, f),
        Sub::Gstar(f) => (Command::Gstar, f),
        Sub::Oracle(f) => (Command::Oracle, f),
        Sub::Synth(f) => (Command::Synth, f),
    };
    match vra_kit::run(command, &flags) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vra-kit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
