use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use riskmin::experiment::{self, ExitStatus, ExperimentConfig};

/// Run risk-minimization experiments from JSON configs.
#[derive(Debug, Parser)]
#[command(name = "riskmin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check a config file and list every violation.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn exit(status: ExitStatus) -> ExitCode {
    ExitCode::from(status.code() as u8)
}

fn load(path: &PathBuf) -> Result<serde_json::Value, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        exit(ExitStatus::IoError)
    })?;
    serde_json::from_str(&text).map_err(|e| {
        eprintln!("error: {}: not valid JSON: {e}", path.display());
        exit(ExitStatus::ConfigError)
    })
}

fn report(violations: &[experiment::Violation]) -> ExitCode {
    for v in violations {
        eprintln!("violation: {v}");
    }
    exit(ExitStatus::ConfigError)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => {
            let value = match load(&config) {
                Ok(v) => v,
                Err(code) => return code,
            };
            let violations = experiment::validate(&value);
            if violations.is_empty() {
                println!("ok");
                exit(ExitStatus::Success)
            } else {
                report(&violations)
            }
        }
        Command::Run { config } => {
            let value = match load(&config) {
                Ok(v) => v,
                Err(code) => return code,
            };
            let cfg = match ExperimentConfig::from_value(&value) {
                Ok(c) => c,
                Err(v) => return report(&v),
            };
            match experiment::run(&cfg) {
                Ok(outcome) => {
                    for p in outcome.outputs.iter().chain(std::iter::once(&outcome.manifest)) {
                        println!("wrote {}", p.display());
                    }
                    if outcome.failures > 0 {
                        eprintln!("{} rows flagged as failed", outcome.failures);
                    }
                    exit(outcome.status())
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit(ExitStatus::of_error(&e))
                }
            }
        }
    }
}
