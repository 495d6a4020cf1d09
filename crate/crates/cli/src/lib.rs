//! Scenario runner front-end: scenario file parsing, run execution with
//! artifact emission, and cross-run comparison.

pub mod compare;
pub mod runner;
pub mod scenario_file;

pub use compare::{compare, load_run_dir, CompareReport};
pub use runner::{execute, render_summary, write_artifacts, RunError};
pub use scenario_file::{load_scenario, parse_fault, parse_scenario_str};
