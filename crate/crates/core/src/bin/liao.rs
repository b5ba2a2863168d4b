use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use liao_core::report::{exit_code, run, Command};
use liao_core::scenario::Scenario;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subcommand {
    /// Hyperbolicity certificate, uniformity report and dichotomy constants.
    Certify,
    /// Qualitative-function series along each sample orbit.
    Exponents,
    /// Bounded solution and Δ-map samples for the standalone dichotomy block.
    Delta,
    /// Conjugacy offsets with equivariance and injectivity checks.
    Conjugate,
}

#[derive(Debug, Parser)]
#[command(name = "liao", version, about = "Hyperbolicity certification and conjugacy construction for C¹ flows")]
struct Cli {
    #[arg(value_enum)]
    command: Subcommand,
    /// Scenario file (JSON, schema version 1).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; defaults to the scenario's `output_dir`, then `.`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Subcommand::Certify => Command::Certify,
        Subcommand::Exponents => Command::Exponents,
        Subcommand::Delta => Command::Delta,
        Subcommand::Conjugate => Command::Conjugate,
    };
    let result = Scenario::load(&cli.scenario).and_then(|(scenario, hash)| {
        let out = cli
            .out
            .clone()
            .or_else(|| scenario.output_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        let seed = cli.seed.unwrap_or(scenario.seed);
        run(command, &scenario, &hash, seed, &out)
    });
    match &result {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if !outcome.success {
                eprintln!("liao {}: some checks failed; see the report", command.name());
            }
        }
        Err(e) => eprintln!("liao {}: {e}", command.name()),
    }
    ExitCode::from(exit_code(&result) as u8)
}
