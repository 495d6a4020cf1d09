//! Cross-run ordering checks: each run directory carries the
//! expectations its scenario declared; compare evaluates them against
//! the summaries of all runs given.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ovzsim_core::config::ConfigTree;

#[derive(Debug, Clone)]
pub struct RunData {
    pub name: String,
    pub throughput_rps: f64,
    pub err_pct: f64,
    pub max_ms: u64,
    pub fail_count: u64,
    pub expectations: BTreeMap<String, String>,
    pub adjusts_applied: u64,
    pub migrations_succeeded: u64,
    pub first_migrate_ms: Option<u64>,
    pub first_adjust_ms: Option<u64>,
}

pub struct CheckLine {
    pub run: String,
    pub description: String,
    pub pass: bool,
}

pub struct CompareReport {
    pub lines: Vec<CheckLine>,
}

impl CompareReport {
    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&format!(
                "[{}] {}: {}\n",
                if line.pass { "PASS" } else { "FAIL" },
                line.run,
                line.description
            ));
        }
        out
    }
}

pub fn load_run_dir(dir: &Path) -> Result<RunData> {
    let summary_path = dir.join("summary.csv");
    let summary = std::fs::read_to_string(&summary_path)
        .with_context(|| format!("missing artifacts: {}", summary_path.display()))?;
    let row = summary
        .lines()
        .nth(1)
        .ok_or_else(|| anyhow!("missing artifacts: {} has no data row", summary_path.display()))?;
    let fields: Vec<&str> = row.split(',').collect();
    if fields.len() != 9 {
        bail!("malformed summary row in {}", summary_path.display());
    }

    let meta_path = dir.join("run.meta");
    let meta_text = std::fs::read_to_string(&meta_path)
        .with_context(|| format!("missing artifacts: {}", meta_path.display()))?;
    let meta = ConfigTree::parse_str(&meta_text, &meta_path.display().to_string())
        .map_err(|e| anyhow!("{e}"))?;
    let mut expectations = BTreeMap::new();
    if let Some(options) = meta.section("expectations") {
        for (key, value) in options {
            expectations.insert(key.clone(), value.to_string());
        }
    }

    let actions_path = dir.join("actions.csv");
    let actions = std::fs::read_to_string(&actions_path)
        .with_context(|| format!("missing artifacts: {}", actions_path.display()))?;
    let mut adjusts_applied = 0;
    let mut migrations_succeeded = 0;
    let mut first_migrate_ms = None;
    let mut first_adjust_ms = None;
    for line in actions.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 7 {
            continue;
        }
        let issued_ms: u64 = fields[0].parse().unwrap_or(0);
        match (fields[1], fields[6]) {
            ("adjust_ubc", "applied") => {
                adjusts_applied += 1;
                first_adjust_ms.get_or_insert(issued_ms);
            }
            ("migrate", "succeeded") => {
                migrations_succeeded += 1;
                first_migrate_ms.get_or_insert(issued_ms);
            }
            ("migrate", _) => {
                first_migrate_ms.get_or_insert(issued_ms);
            }
            _ => {}
        }
    }

    Ok(RunData {
        name: fields[0].to_string(),
        throughput_rps: fields[7].parse().context("throughput field")?,
        err_pct: fields[6].parse().context("err_pct field")?,
        max_ms: fields[4].parse().context("max field")?,
        fail_count: fields[8].parse().context("fail_count field")?,
        expectations,
        adjusts_applied,
        migrations_succeeded,
        first_migrate_ms,
        first_adjust_ms,
    })
}

pub fn compare(dirs: &[PathBuf]) -> Result<CompareReport> {
    if dirs.len() < 2 {
        bail!("compare needs at least two run directories");
    }
    let runs: Vec<RunData> = dirs.iter().map(|d| load_run_dir(d)).collect::<Result<_>>()?;
    let by_name: BTreeMap<String, &RunData> = runs.iter().map(|r| (r.name.clone(), r)).collect();

    let mut lines = Vec::new();
    for run in &runs {
        for (key, value) in &run.expectations {
            let line = evaluate(run, key, value, &by_name)?;
            lines.push(line);
        }
    }
    Ok(CompareReport { lines })
}

fn other<'a>(
    by_name: &'a BTreeMap<String, &RunData>,
    name: &str,
) -> Result<&'a RunData> {
    by_name
        .get(name)
        .copied()
        .ok_or_else(|| anyhow!("missing artifacts: expectation references run {name:?} which was not supplied"))
}

fn evaluate(
    run: &RunData,
    key: &str,
    value: &str,
    by_name: &BTreeMap<String, &RunData>,
) -> Result<CheckLine> {
    let (description, pass) = match key {
        "failcount" => {
            let expected: u64 = value.parse().context("failcount expectation")?;
            (
                format!("fail count {} == {}", run.fail_count, expected),
                run.fail_count == expected,
            )
        }
        "failcount_above" => {
            let bound: u64 = value.parse().context("failcount_above expectation")?;
            (
                format!("fail count {} > {}", run.fail_count, bound),
                run.fail_count > bound,
            )
        }
        "failcount_below" => {
            let peer = other(by_name, value)?;
            (
                format!("fail count {} < {} ({})", run.fail_count, peer.fail_count, peer.name),
                run.fail_count < peer.fail_count,
            )
        }
        "errpct" => {
            let expected: f64 = value.parse().context("errpct expectation")?;
            (
                format!("error rate {:.4}% == {:.4}%", run.err_pct, expected),
                (run.err_pct - expected).abs() < 1e-9,
            )
        }
        "throughput_below" => {
            let peer = other(by_name, value)?;
            (
                format!(
                    "throughput {:.3} < {:.3} ({})",
                    run.throughput_rps, peer.throughput_rps, peer.name
                ),
                run.throughput_rps < peer.throughput_rps,
            )
        }
        "throughput_above" => {
            let peer = other(by_name, value)?;
            (
                format!(
                    "throughput {:.3} > {:.3} ({})",
                    run.throughput_rps, peer.throughput_rps, peer.name
                ),
                run.throughput_rps > peer.throughput_rps,
            )
        }
        "max_ratio_at_least" => {
            let (name, factor) = value
                .split_once(':')
                .ok_or_else(|| anyhow!("max_ratio_at_least expects name:factor"))?;
            let factor: f64 = factor.parse().context("ratio factor")?;
            let peer = other(by_name, name)?;
            let ratio = run.max_ms as f64 / peer.max_ms.max(1) as f64;
            (
                format!(
                    "max {} / max {} ({}) = {:.2} >= {:.2}",
                    run.max_ms, peer.max_ms, peer.name, ratio, factor
                ),
                ratio >= factor,
            )
        }
        "adjusts" => {
            let expected: u64 = value.parse().context("adjusts expectation")?;
            (
                format!("adjustments applied {} == {}", run.adjusts_applied, expected),
                run.adjusts_applied == expected,
            )
        }
        "migrations" => {
            let expected: u64 = value.parse().context("migrations expectation")?;
            (
                format!(
                    "migrations succeeded {} == {}",
                    run.migrations_succeeded, expected
                ),
                run.migrations_succeeded == expected,
            )
        }
        "migrate_before_adjust" => {
            let pass = match (run.first_migrate_ms, run.first_adjust_ms) {
                (Some(m), Some(a)) => m < a,
                _ => false,
            };
            (
                format!(
                    "first migration at {:?} precedes first adjustment at {:?}",
                    run.first_migrate_ms, run.first_adjust_ms
                ),
                pass,
            )
        }
        unknown => bail!("unknown expectation key {unknown:?}"),
    };
    Ok(CheckLine {
        run: run.name.clone(),
        description,
        pass,
    })
}
