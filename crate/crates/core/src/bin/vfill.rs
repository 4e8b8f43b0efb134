//! Scenario runner CLI: validate, run, compare, gen-baseline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vfill::engine::EngineError;
use vfill::scenario::{self, Overrides, ScenarioConfig, ScenarioError};

#[derive(Parser)]
#[command(name = "vfill", about = "Decentralized EV charging valley-filling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the scenario's `output` field.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker count for the per-agent primal steps; results are identical
    /// for any value.
    #[arg(long)]
    workers: Option<usize>,
    /// Also write the per-iteration trace CSV.
    #[arg(long)]
    trace: bool,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            workers: self.workers,
            trace: self.trace,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and list every violation.
    Validate(CommonArgs),
    /// Validate, run, and write report.json plus the CSV traces.
    Run(CommonArgs),
    /// Run the attack-free twin and each attack section, with comparisons.
    Compare(CommonArgs),
    /// Write the scenario's synthetic baseline as CSV.
    GenBaseline(CommonArgs),
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

fn exit_for(err: &ScenarioError) -> u8 {
    match err {
        ScenarioError::Validation(_) => EXIT_VALIDATION,
        ScenarioError::Engine(EngineError::NumericalDivergence { .. }) => EXIT_DIVERGENCE,
        _ => 1,
    }
}

fn report_error(err: &ScenarioError) -> ExitCode {
    if let ScenarioError::Validation(report) = err {
        for d in &report.diagnostics {
            eprintln!("error[{}]: {}", d.code, d.message);
        }
    }
    eprintln!("error: {err}");
    ExitCode::from(exit_for(err))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate(args) => {
            let (config, base) = match ScenarioConfig::load(&args.config) {
                Ok(loaded) => loaded,
                Err(e) => return report_error(&e),
            };
            let report = scenario::validate(&config, &base);
            if report.is_valid() {
                println!("ok: {} is runnable", args.config.display());
                ExitCode::SUCCESS
            } else {
                for d in &report.diagnostics {
                    eprintln!("error[{}]: {}", d.code, d.message);
                }
                eprintln!("{} violation(s)", report.diagnostics.len());
                ExitCode::from(EXIT_VALIDATION)
            }
        }
        Command::Run(args) => match scenario::run_command(&args.config, &args.overrides()) {
            Ok(report) => {
                println!(
                    "{} after {} iterations; objective {:.6e}, min voltage {:.4} p.u.",
                    if report.converged { "converged" } else { "stopped at the iteration cap" },
                    report.iterations,
                    report.objective,
                    report.min_voltage_pu
                );
                ExitCode::SUCCESS
            }
            Err(e) => report_error(&e),
        },
        Command::Compare(args) => match scenario::compare_command(&args.config, &args.overrides())
        {
            Ok((free, variants)) => {
                println!(
                    "attack-free: objective {:.6e} in {} iterations",
                    free.objective, free.iterations
                );
                for v in &variants {
                    println!(
                        "{}: objective {:.6e} (Δ {:+.3e}), ζ = {:.4}",
                        v.label,
                        v.report.objective,
                        v.comparison.objective_delta,
                        v.comparison.zeta
                    );
                }
                ExitCode::SUCCESS
            }
            Err(e) => report_error(&e),
        },
        Command::GenBaseline(args) => {
            match scenario::gen_baseline_command(&args.config, &args.overrides()) {
                Ok(path) => {
                    println!("wrote {}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => report_error(&e),
            }
        }
    }
}
