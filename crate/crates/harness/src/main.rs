use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use vault_harness::runner::Runner;
use vault_harness::scenario::Scenario;
use vault_harness::{crash_matrix, interleave, scenarios_dir};

#[derive(Parser)]
#[command(name = "vault-harness", about = "Crash-injection and interleaving checks for a vault")]
struct Cli {
    /// Path of the `vault` binary under test.
    #[arg(long, env = "VAULT_BIN", default_value = "vault")]
    vault_bin: PathBuf,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crash every scenario operation at every site it reaches.
    CrashMatrix {
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Only the scenario with this name.
        #[arg(long)]
        only: Option<String>,
    },
    /// Run concurrent mixes and compare them with serial orders.
    Interleave {
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    let runner = Runner::new(&cli.vault_bin);
    match cli.command {
        Command::CrashMatrix { scenarios, only } => {
            let mut list = Scenario::load_dir(&scenarios.unwrap_or_else(|| scenarios_dir("crash")))?;
            list.retain(|s| only.as_ref().is_none_or(|o| &s.name == o));
            let report = crash_matrix::run(&runner, &list)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for c in report.violations() {
                    println!("VIOLATION {} VAULT_CRASH_AT={}: {:?}", c.scenario, c.crash_at, c.verdict);
                }
                println!("{}", report.summary());
            }
            Ok(report.violations().is_empty())
        }
        Command::Interleave { scenarios, seeds } => {
            let list = Scenario::load_dir(&scenarios.unwrap_or_else(|| scenarios_dir("interleave")))?;
            let report = interleave::run(&runner, &list, seeds)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for t in report.violations() {
                    println!("VIOLATION {} seed {}: {}", t.mix, t.seed, t.violation.as_deref().unwrap_or(""));
                }
                println!("{}", report.summary());
            }
            Ok(report.violations().is_empty())
        }
    }
}
