//! Scenario execution and artifact emission: summary (text + CSV),
//! request-level trace, plot-ready series, per-second usage series,
//! event trace and action log.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use ovzsim_core::scenario::ScenarioSpec;
use ovzsim_core::simkernel::{run_scenario, RunArtifacts, SimError, SummaryReport};

/// How a run ended, mapped to the process exit code by the front-end.
#[derive(Debug)]
pub enum RunError {
    /// Scenario could not be run at all (exit 2).
    Validation(String),
    /// A run-time invariant check fired (exit 3).
    Invariant(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Validation(m) => write!(f, "validation: {m}"),
            RunError::Invariant(m) => write!(f, "invariant: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

pub fn execute(spec: &ScenarioSpec, out_dir: &Path) -> Result<RunArtifacts> {
    let artifacts = run_scenario(spec).map_err(|e| match e {
        SimError::InvariantViolation { .. } | SimError::NoKillableProcess { .. } => {
            RunError::Invariant(e.to_string())
        }
        other => RunError::Validation(other.to_string()),
    })?;
    write_artifacts(spec, &artifacts, out_dir)?;
    Ok(artifacts)
}

pub fn write_artifacts(
    spec: &ScenarioSpec,
    artifacts: &RunArtifacts,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    std::fs::write(out_dir.join("summary.txt"), render_summary(&artifacts.summary))?;
    std::fs::write(out_dir.join("summary.csv"), summary_csv(&artifacts.summary))?;

    let mut requests = String::from("issued_ms,completed_ms,response_ms,ok,container,workload,thread\n");
    for o in &artifacts.outcomes {
        writeln!(
            requests,
            "{},{},{},{},{},{},{}",
            o.issued_ms,
            o.completed_ms,
            o.response_ms(),
            o.ok,
            o.container,
            o.workload,
            o.thread
        )?;
    }
    std::fs::write(out_dir.join("requests.csv"), requests)?;

    std::fs::write(out_dir.join("plot.csv"), plot_csv(artifacts))?;

    let mut series = String::from(
        "time_s,container,node,privvm_held,privvm_maxheld,privvm_failcnt,oomguar_held,oomguar_maxheld,oomguar_failcnt,resident_pages,node_resident,node_swap_used,node_cpu\n",
    );
    for row in &artifacts.series {
        writeln!(
            series,
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.4}",
            row.time_s,
            row.container,
            row.node,
            row.privvm_held,
            row.privvm_maxheld,
            row.privvm_failcnt,
            row.oomguar_held,
            row.oomguar_maxheld,
            row.oomguar_failcnt,
            row.resident_pages,
            row.node_resident,
            row.node_swap_used,
            row.node_cpu
        )?;
    }
    std::fs::write(out_dir.join("series.csv"), series)?;

    let mut events = String::from("time_ms,event_kind,node,container,detail\n");
    for e in &artifacts.trace {
        writeln!(events, "{},{},{},{},{}", e.time_ms, e.kind, e.node, e.container, e.detail)?;
    }
    std::fs::write(out_dir.join("events.csv"), events)?;

    let mut actions =
        String::from("issued_ms,kind,container,source,target,payload,outcome,completed_ms\n");
    for a in &artifacts.actions {
        writeln!(
            actions,
            "{},{},{},{},{},{},{},{}",
            a.issued_ms,
            a.kind.name(),
            a.container,
            a.source,
            a.target.clone().unwrap_or_default(),
            a.payload.clone().unwrap_or_default(),
            a.outcome,
            a.completed_ms.map(|v| v.to_string()).unwrap_or_default()
        )?;
    }
    std::fs::write(out_dir.join("actions.csv"), actions)?;

    let mut meta = String::new();
    writeln!(meta, "[run]")?;
    writeln!(meta, "name={}", spec.name)?;
    writeln!(meta, "seed={}", spec.seed)?;
    writeln!(
        meta,
        "mode={}",
        match spec.mode {
            ovzsim_core::scenario::RunMode::InProcess => "inprocess",
            ovzsim_core::scenario::RunMode::Networked => "networked",
        }
    )?;
    if !spec.expectations.is_empty() {
        writeln!(meta, "\n[expectations]")?;
        for (key, value) in &spec.expectations {
            writeln!(meta, "{key}={value}")?;
        }
    }
    std::fs::write(out_dir.join("run.meta"), meta)?;

    if !artifacts.warnings.is_empty() {
        std::fs::write(out_dir.join("warnings.txt"), artifacts.warnings.join("\n") + "\n")?;
    }
    Ok(())
}

pub fn render_summary(summary: &SummaryReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Run: {}", summary.scenario);
    let _ = writeln!(
        out,
        "{:>9} {:>8} {:>6} {:>8} {:>9} {:>6} {:>11} {:>10}",
        "Requests", "Avg", "Min", "Max", "Std Dev", "Err %", "Throughput", "Fail Count"
    );
    let _ = writeln!(
        out,
        "{:>9} {:>8.0} {:>6} {:>8} {:>9.2} {:>6.2} {:>11.2} {:>10}",
        summary.requests,
        summary.avg_ms,
        summary.min_ms,
        summary.max_ms,
        summary.stddev_ms,
        summary.err_pct,
        summary.throughput_rps,
        summary.fail_count
    );
    out
}

pub fn summary_csv(summary: &SummaryReport) -> String {
    format!(
        "name,requests,avg_ms,min_ms,max_ms,stddev_ms,err_pct,throughput_rps,fail_count\n{},{},{:.3},{},{},{:.3},{:.4},{:.4},{}\n",
        summary.scenario,
        summary.requests,
        summary.avg_ms,
        summary.min_ms,
        summary.max_ms,
        summary.stddev_ms,
        summary.err_pct,
        summary.throughput_rps,
        summary.fail_count
    )
}

/// Per-request plot series: individual response times plus running
/// average, median, standard deviation and throughput, ordered by
/// completion time.
fn plot_csv(artifacts: &RunArtifacts) -> String {
    let mut outcomes = artifacts.outcomes.clone();
    outcomes.sort_by_key(|o| (o.completed_ms, o.issued_ms));
    let mut out = String::from(
        "index,completed_ms,response_ms,running_avg_ms,running_median_ms,running_stddev_ms,running_throughput_rps\n",
    );
    let first_issue = outcomes.iter().map(|o| o.issued_ms).min().unwrap_or(0);
    let mut sorted_times: Vec<u64> = Vec::new();
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for (i, o) in outcomes.iter().enumerate() {
        let t = o.response_ms();
        let pos = sorted_times.partition_point(|v| *v <= t);
        sorted_times.insert(pos, t);
        sum += t as f64;
        sum_sq += (t as f64) * (t as f64);
        let n = (i + 1) as f64;
        let avg = sum / n;
        let var = (sum_sq / n - avg * avg).max(0.0);
        let median = if sorted_times.len() % 2 == 1 {
            sorted_times[sorted_times.len() / 2] as f64
        } else {
            (sorted_times[sorted_times.len() / 2 - 1] + sorted_times[sorted_times.len() / 2]) as f64
                / 2.0
        };
        let elapsed_s = (o.completed_ms.saturating_sub(first_issue)).max(1) as f64 / 1000.0;
        let _ = writeln!(
            out,
            "{},{},{},{:.2},{:.1},{:.2},{:.3}",
            i + 1,
            o.completed_ms,
            t,
            avg,
            median,
            var.sqrt(),
            n / elapsed_s
        );
    }
    out
}
