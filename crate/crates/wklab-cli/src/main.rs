//! Command-line driver for the laboratory.
//!
//! Three subcommands:
//!
//! - `run <config>` executes a scenario and writes `report.json` plus CSV
//!   and SVG artifacts into the output directory;
//! - `check-invariants <config>` runs the cross-module property battery at
//!   the config's scale and prints a table of worst witnesses;
//! - `print-schema` prints the documented config grammar.
//!
//! Exit codes: 0 when every embedded assertion passes, 2 when the config is
//! rejected before any computation, 1 when an experiment fails or a module
//! reports an error (the structured error still lands in the report).

mod config;
mod experiments;
mod invariants;
mod plots;
mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::experiments::Context;
use crate::report::{write_report, Report};

#[derive(Parser)]
#[command(
    name = "wklab",
    version,
    about = "Scenario runner for the weak KAM / singular flow laboratory"
)]
struct Cli {
    /// Size of the global worker pool (default: all cores).  Reports are
    /// byte-identical at any setting.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, overriding the config's `output.directory`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Replaces the seed of every measure generator in the config.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario config; write report.json and artifacts.
    Run { config: PathBuf },
    /// Run the cross-module property battery at the config's scale.
    CheckInvariants { config: PathBuf },
    /// Print the documented config grammar.
    PrintSchema,
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // A second initialization attempt (tests driving main in-process)
        // is harmless: the first pool wins and determinism doesn't care.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let code = match cli.command {
        Command::Run { config } => cmd_run(&config, cli.out_dir.as_deref(), cli.seed_override),
        Command::CheckInvariants { config } => {
            cmd_check(&config, cli.seed_override)
        }
        Command::PrintSchema => {
            print!("{}", config::SCHEMA);
            0
        }
    };
    std::process::exit(code);
}

fn cmd_run(path: &std::path::Path, out_dir: Option<&std::path::Path>, seed: Option<u64>) -> i32 {
    let scenario = match config::load(path, out_dir, seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return 2;
        }
    };
    if let Err(e) = std::fs::create_dir_all(&scenario.out_dir) {
        eprintln!("cannot create output directory {}: {e}", scenario.out_dir.display());
        return 1;
    }

    let mut ctx = Context::new(&scenario);
    let mut runs = Vec::with_capacity(scenario.experiments.len());
    for (idx, experiment) in scenario.experiments.iter().enumerate() {
        let run = experiments::run_experiment(&mut ctx, idx, experiment, &scenario.out_dir);
        let verdict = if run.pass { "PASS" } else { "FAIL" };
        println!("[{verdict}] {} — {}", run.kind, run.label);
        if let Some(err) = &run.error {
            println!("       error: {err}");
        }
        for metric in run.metrics.iter().filter(|m| !m.pass) {
            println!(
                "       {}: {} = {:e} (target {:e}, tolerance {:e})",
                metric.name, metric.operation, metric.value, metric.target, metric.tolerance
            );
        }
        runs.push(run);
    }

    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = Report::new(stem, scenario.echo.clone(), runs);
    let pass = report.pass;
    match write_report(&report, &scenario.out_dir) {
        Ok(path) => println!(
            "{}: {} experiments, report at {}",
            if pass { "PASS" } else { "FAIL" },
            report.experiments.len(),
            path.display()
        ),
        Err(e) => {
            eprintln!("cannot write report.json: {e}");
            return 1;
        }
    }
    if pass {
        0
    } else {
        1
    }
}

fn cmd_check(path: &std::path::Path, seed: Option<u64>) -> i32 {
    let scenario = match config::load(path, None, seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return 2;
        }
    };
    let opts = scenario.invariants_opts();
    let mut ctx = Context::new(&scenario);
    match invariants::battery(&mut ctx, &opts) {
        Ok(rows) => {
            invariants::print_table(&rows);
            if rows.iter().all(|r| r.pass) {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("battery aborted: {e}");
            1
        }
    }
}
