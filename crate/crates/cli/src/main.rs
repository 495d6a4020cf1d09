use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ovzsim_cli::{compare, execute, load_scenario, parse_fault, render_summary, RunError};
use ovzsim_core::scenario::RunMode;

#[derive(Parser)]
#[command(
    name = "ovzsim",
    about = "Deterministic simulator and policy engine for container cluster memory management",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Inprocess,
    Networked,
}

#[derive(Clone, Copy, ValueEnum)]
enum ManagerArg {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts to an output directory.
    Run {
        /// Scenario file to execute.
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory for reports and traces.
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the execution mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Override whether the manager runs.
        #[arg(long, value_enum)]
        manager: Option<ManagerArg>,
        /// Override the simulated horizon in seconds.
        #[arg(long)]
        horizon: Option<u64>,
        /// Inject a fault to prove the run-time checks are live
        /// (kinds: leak-resident).
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Evaluate the declared expectations across completed run
    /// directories.
    Compare {
        /// Two or more run directories produced by `run`.
        dirs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            mode,
            manager,
            horizon,
            inject_fault,
        } => {
            let mut spec = match load_scenario(&scenario) {
                Ok(spec) => spec,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(2);
                }
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            if let Some(mode) = mode {
                spec.mode = match mode {
                    ModeArg::Inprocess => RunMode::InProcess,
                    ModeArg::Networked => RunMode::Networked,
                };
            }
            if let Some(manager) = manager {
                spec.manager.enabled = matches!(manager, ManagerArg::On);
            }
            if let Some(horizon) = horizon {
                spec.horizon_s = horizon;
            }
            if let Some(fault) = inject_fault {
                spec.inject_fault = match parse_fault(&fault) {
                    Ok(kind) => Some(kind),
                    Err(e) => {
                        eprintln!("error: {e:#}");
                        return ExitCode::from(2);
                    }
                };
            }
            match execute(&spec, &out) {
                Ok(artifacts) => {
                    print!("{}", render_summary(&artifacts.summary));
                    for warning in &artifacts.warnings {
                        eprintln!("warning: {warning}");
                    }
                    println!("artifacts written to {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    match e.downcast_ref::<RunError>() {
                        Some(RunError::Invariant(_)) => ExitCode::from(3),
                        _ => ExitCode::from(2),
                    }
                }
            }
        }
        Command::Compare { dirs } => match compare(&dirs) {
            Ok(report) => {
                print!("{}", report.render());
                if report.all_pass() {
                    println!("all expectations hold");
                    ExitCode::SUCCESS
                } else {
                    println!("some expectations failed");
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        },
    }
}
