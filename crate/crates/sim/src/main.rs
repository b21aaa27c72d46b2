//! `sim` — run tree/star consensus experiments on the deterministic
//! network simulator.
//!
//! Exit codes: 0 success, 2 configuration/validation error, 3 invariant
//! violation during a run.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use treebft::collections::Scheme;
use treebft::perfmodel::{self, ModelInputs};
use treebft_sim::harness::{self, RunMetrics};
use treebft_sim::scenario::load_scenario;

#[derive(Parser)]
#[command(name = "sim", about = "tree-based BFT consensus simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario (file path or preset name) and print its CSV.
    Run(RunArgs),
    /// Run a scenario once per axis value and print the aggregated CSV.
    Sweep(SweepArgs),
    /// Print one analytic-model row for the given parameters.
    Model(ModelArgs),
    /// Compare two run CSVs: measured speedup next to the model estimate.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file or preset (large-scale, regional, national, *-star).
    scenario: String,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the run CSV here (also printed to stdout).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the delivery trace here (one line per delivery).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the per-second decision timeline here.
    #[arg(long)]
    timeline: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    scenario: String,
    /// Scenario field to vary: n, stretch, seed, duration_s,
    /// view_timeout_s or block_bits.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    n: u64,
    #[arg(long)]
    height: u32,
    #[arg(long)]
    fanout: u64,
    #[arg(long, default_value_t = 100_000)]
    block_bits: u64,
    #[arg(long, default_value_t = 25_000_000)]
    bandwidth_bps: u64,
    #[arg(long, default_value_t = 0.2)]
    rtt_s: f64,
    #[arg(long, default_value_t = 0.0)]
    phi_s: f64,
    /// naive or aggregate.
    #[arg(long, default_value = "aggregate")]
    scheme: String,
    /// Drop the envelope and certificate overhead (bare block formulas).
    #[arg(long)]
    bare: bool,
}

#[derive(Args)]
struct CompareArgs {
    csv_a: PathBuf,
    csv_b: PathBuf,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Invariant(msg)) => {
            eprintln!("invariant violation: {msg}");
            ExitCode::from(3)
        }
    }
}

enum CliError {
    Validation(String),
    Invariant(String),
}

impl From<harness::HarnessError> for CliError {
    fn from(e: harness::HarnessError) -> Self {
        match e {
            harness::HarnessError::Invariant(m) => CliError::Invariant(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let mut cfg = load_scenario(&args.scenario).map_err(validation)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let (metrics, trace) =
                harness::run_with_trace(&cfg, args.trace.is_some())?;
            let csv = metrics.to_csv();
            print!("{csv}");
            if let Some(path) = args.csv {
                std::fs::write(path, &csv).map_err(validation)?;
            }
            if let Some(path) = args.timeline {
                std::fs::write(path, metrics.timeline_csv()).map_err(validation)?;
            }
            if let (Some(path), Some(lines)) = (args.trace, trace) {
                std::fs::write(path, lines.join("\n") + "\n").map_err(validation)?;
            }
            Ok(())
        }
        Command::Sweep(args) => {
            let cfg = load_scenario(&args.scenario).map_err(validation)?;
            let csv = harness::sweep(&cfg, &args.axis, &args.values)?;
            print!("{csv}");
            if let Some(path) = args.csv {
                std::fs::write(path, &csv).map_err(validation)?;
            }
            Ok(())
        }
        Command::Model(args) => {
            let scheme = match args.scheme.as_str() {
                "naive" => Scheme::NaiveSet,
                "aggregate" => Scheme::Aggregate,
                other => {
                    return Err(CliError::Validation(format!(
                        "unknown scheme {other}; expected naive or aggregate"
                    )))
                }
            };
            let inputs = ModelInputs {
                n: args.n,
                height: args.height,
                root_fanout: args.fanout,
                block_bits: args.block_bits,
                bandwidth_bps: args.bandwidth_bps,
                rtt_s: args.rtt_s,
                phi_s: args.phi_s,
                scheme,
                with_overhead: !args.bare,
            };
            println!("{}", perfmodel::CSV_HEADER);
            println!("{}", perfmodel::csv_row(&inputs));
            Ok(())
        }
        Command::Compare(args) => {
            let a = read_metrics(&args.csv_a)?;
            let b = read_metrics(&args.csv_b)?;
            let report = harness::compare(&a, &b)?;
            print!("{}", report.render());
            Ok(())
        }
    }
}

fn read_metrics(path: &PathBuf) -> Result<RunMetrics, CliError> {
    let text = std::fs::read_to_string(path).map_err(validation)?;
    RunMetrics::from_csv(&text).map_err(validation)
}
