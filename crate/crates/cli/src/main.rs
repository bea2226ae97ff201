use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use piperate_core::harness::{self, HarnessError};
use piperate_core::scenario::ScenarioConfig;

/// Simulate data-rate control of storage read pipes.
#[derive(Parser)]
#[command(name = "piperate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write throughput.csv, timeline.csv and summary.txt.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a parameter, e.g. `--set dt=0.05` or `--set shaping_enabled=false`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare an unshaped run with a shaped run of the same scenario.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        shaped: PathBuf,
        /// File to write the report to; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

const EXIT_INVALID: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

fn exit_code(err: &HarnessError) -> u8 {
    use piperate_core::scenario::ScenarioError;
    match err {
        HarnessError::InvalidScenario(ScenarioError::Io { .. }) | HarnessError::Io { .. } => {
            EXIT_IO
        }
        HarnessError::InvalidScenario(_) | HarnessError::Malformed(..) => EXIT_INVALID,
        HarnessError::MismatchedScenarios(_) => EXIT_MISMATCH,
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            overrides,
        } => {
            let artifacts = harness::run_scenario(&scenario, &out, &overrides)?;
            print!("{}", artifacts.summary);
        }
        Command::Compare {
            baseline,
            shaped,
            out,
        } => {
            let report = harness::compare(&baseline, &shaped)?.render();
            match out {
                Some(path) => {
                    std::fs::write(&path, &report).map_err(|source| HarnessError::Io {
                        path: path.display().to_string(),
                        source,
                    })?
                }
                None => print!("{report}"),
            }
        }
        Command::Validate { scenario } => {
            let cfg = ScenarioConfig::load(&scenario)?;
            println!(
                "ok: {} ({} machines, {} container requests)",
                cfg.name,
                cfg.machines.len(),
                cfg.container_requests.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
