//! Scenario file parsing. Scenarios use the same INI-style syntax as the
//! configuration files: slash-path sections, `key=value` options, `#`
//! comments and `{'key':value}` map literals.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ovzsim_core::config::{ConfigTree, ConfigValue};
use ovzsim_core::scenario::{
    ContainerSpec, FaultKind, ManagerSpec, NodeSpec, RunMode, ScenarioSpec,
};
use ovzsim_core::simkernel::{PreforkConfig, WorkloadSpec};
use ovzsim_core::ubc::MemoryProfile;
use ovzsim_core::wire::Credentials;

pub fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading scenario {}", path.display()))?;
    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "scenario".to_string());
    parse_scenario_str(&text, &path.display().to_string(), &default_name)
}

pub fn parse_scenario_str(text: &str, origin: &str, default_name: &str) -> Result<ScenarioSpec> {
    let tree = ConfigTree::parse_str(text, origin).map_err(|e| anyhow!("{e}"))?;
    let mut spec = ScenarioSpec::new(default_name);

    if let Some(name) = tree.get_str("run", "name") {
        spec.name = name.to_string();
    }
    if let Some(seed) = tree.get_i64("run", "seed") {
        spec.seed = seed as u64;
    }
    if let Some(horizon) = tree.get_i64("run", "horizon") {
        spec.horizon_s = horizon as u64;
    }
    if let Some(mode) = tree.get_str("run", "mode") {
        spec.mode = match mode {
            "inprocess" => RunMode::InProcess,
            "networked" => RunMode::Networked,
            other => bail!("{origin}: unknown mode {other:?}"),
        };
    }

    for (section, options) in tree.sections() {
        if let Some(name) = section.strip_prefix("profile/") {
            let need = |key: &str| -> Result<u64> {
                options
                    .get(key)
                    .and_then(ConfigValue::as_i64)
                    .map(|v| v as u64)
                    .ok_or_else(|| anyhow!("{origin}: profile {name} missing {key}"))
            };
            spec.profiles.push(MemoryProfile::from_mib(
                name,
                need("oomguarpages_mib")?,
                need("vmguarpages_mib")?,
                need("privvmpages_barrier_mib")?,
                need("privvmpages_limit_mib")?,
            ));
        } else if let Some(id) = section.strip_prefix("node/") {
            let need = |key: &str| -> Result<u64> {
                options
                    .get(key)
                    .and_then(ConfigValue::as_i64)
                    .map(|v| v as u64)
                    .ok_or_else(|| anyhow!("{origin}: node {id} missing {key}"))
            };
            spec.nodes.push(NodeSpec {
                id: id.to_string(),
                ram_mib: need("ram_mib")?,
                swap_mib: need("swap_mib")?,
            });
        } else if let Some(rest) = section.strip_prefix("container/") {
            if rest.contains('/') {
                continue; // subsections handled with their container
            }
            let host = options
                .get("host")
                .and_then(ConfigValue::as_str)
                .ok_or_else(|| anyhow!("{origin}: container {rest} missing host"))?;
            let profile = options
                .get("profile")
                .map(|v| v.to_string())
                .ok_or_else(|| anyhow!("{origin}: container {rest} missing profile"))?;
            let web_section = format!("container/{rest}/web");
            let web_server = if tree.has_section(&web_section) {
                Some(parse_prefork(&tree, &web_section))
            } else {
                None
            };
            spec.containers.push(ContainerSpec {
                id: rest.to_string(),
                host: host.to_string(),
                profile,
                web_server,
                replica_group: options
                    .get("replica_group")
                    .and_then(ConfigValue::as_str)
                    .map(str::to_string),
            });
        } else if let Some(target) = section.strip_prefix("workload/") {
            let mut workload = WorkloadSpec {
                target: target.to_string(),
                ..WorkloadSpec::default()
            };
            let geti = |key: &str, default: i64| -> i64 {
                options.get(key).and_then(ConfigValue::as_i64).unwrap_or(default)
            };
            workload.threads = geti("threads", workload.threads as i64) as u32;
            workload.ramp_up_s = geti("ramp_up", workload.ramp_up_s as i64) as u64;
            workload.loop_count = geti("loop_count", workload.loop_count as i64) as u32;
            workload.requests_per_loop =
                geti("requests_per_loop", workload.requests_per_loop as i64) as u32;
            if let Some(v) = options.get("think_time_mean_ms").and_then(ConfigValue::as_f64) {
                workload.think_time_mean_ms = v;
            }
            if let Some(v) = options.get("think_time_stddev_ms").and_then(ConfigValue::as_f64) {
                workload.think_time_stddev_ms = v;
            }
            workload.base_service_time_ms =
                geti("base_service_time_ms", workload.base_service_time_ms as i64) as u64;
            workload.rng_seed = geti("rng_seed", 0) as u64;
            spec.workloads.push(workload);
        }
    }

    if let Some(ladder) = tree.get("profiles", "ladder") {
        spec.ladder = ladder
            .to_string()
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }

    if tree.has_section("manager") {
        spec.manager = parse_manager(&tree, origin)?;
    }

    if let Some(options) = tree.section("sim") {
        let t = &mut spec.tunables;
        let geti = |key: &str, default: u64| -> u64 {
            options
                .get(key)
                .and_then(ConfigValue::as_i64)
                .map(|v| v as u64)
                .unwrap_or(default)
        };
        t.container_base_mib = geti("container_base_mib", t.container_base_mib);
        t.services_mib = geti("services_mib", t.services_mib);
        t.worker_fresh_virtual_mib = geti("worker_fresh_virtual_mib", t.worker_fresh_virtual_mib);
        t.worker_warm_virtual_mib = geti("worker_warm_virtual_mib", t.worker_warm_virtual_mib);
        if let Some(v) = options.get("shared_fraction").and_then(ConfigValue::as_f64) {
            t.shared_fraction = v;
        }
        t.error_response_ms = geti("error_response_ms", t.error_response_ms);
        t.kmem_per_process_bytes = geti("kmem_per_process_bytes", t.kmem_per_process_bytes);
        t.conn_buf_bytes = geti("conn_buf_bytes", t.conn_buf_bytes);
        t.checkpoint_pages = geti("checkpoint_pages", t.checkpoint_pages);
        t.transfer_rate_pages_per_s =
            geti("transfer_rate_pages_per_s", t.transfer_rate_pages_per_s);
        if let Some(v) = options
            .get("cpu_share_per_busy_worker")
            .and_then(ConfigValue::as_f64)
        {
            t.cpu_share_per_busy_worker = v;
        }
    }

    if let Some(options) = tree.section("expectations") {
        for (key, value) in options {
            spec.expectations.insert(key.clone(), value.to_string());
        }
    }

    spec.validate().map_err(|e| anyhow!("{origin}: {e}"))?;
    Ok(spec)
}

fn parse_prefork(tree: &ConfigTree, section: &str) -> PreforkConfig {
    let mut config = PreforkConfig::default();
    let geti = |key: &str, default: i64| -> i64 {
        tree.get_i64(section, key).unwrap_or(default)
    };
    config.start_servers = geti("start_servers", config.start_servers as i64) as u32;
    config.min_spare = geti("min_spare", config.min_spare as i64) as u32;
    config.max_spare = geti("max_spare", config.max_spare as i64) as u32;
    config.max_clients = geti("max_clients", config.max_clients as i64) as u32;
    if let Some(flag) = tree.get_str(section, "keepalive") {
        config.keepalive_enabled = flag == "on";
    }
    config.keepalive_timeout_ms =
        geti("keepalive_timeout", (config.keepalive_timeout_ms / 1000) as i64) as u64 * 1000;
    config
}

fn parse_manager(tree: &ConfigTree, origin: &str) -> Result<ManagerSpec> {
    let mut manager = ManagerSpec::default();
    match tree.get_str("manager", "enabled") {
        Some("on") => manager.enabled = true,
        Some("off") | None => manager.enabled = false,
        Some(other) => bail!("{origin}: manager enabled must be on or off, got {other:?}"),
    }
    if let Some(v) = tree.get_i64("manager", "check_interval") {
        manager.check_interval_s = v as u64;
    }
    if let Some(v) = tree.get_i64("manager", "frequency") {
        manager.sampling_period_s = v as u64;
    }
    if let Some(map) = tree.get_map("manager", "overload-mem-default") {
        if let Some(v) = map.get("threshold").and_then(|m| m.as_f64()) {
            manager.mem_threshold = v;
        }
    }
    if let Some(map) = tree.get_map("manager", "overload-cpu-auto_regressive_order_1") {
        if let Some(v) = map.get("threshold").and_then(|m| m.as_f64()) {
            manager.cpu_threshold = v;
        }
    }
    if let Some(flag) = tree.get_str("manager", "replication") {
        manager.replication_enabled = flag == "on";
    }
    if let Some(v) = tree.get_f64("manager", "replication_threshold") {
        manager.replication_threshold = v;
    }
    if let (Some(username), Some(password)) = (
        tree.get_str("manager", "username"),
        tree.get_str("manager", "password"),
    ) {
        manager.credentials = Credentials {
            username: username.to_string(),
            password: password.to_string(),
        };
    }
    Ok(manager)
}

/// Parse an `--inject-fault` argument.
pub fn parse_fault(name: &str) -> Result<FaultKind> {
    match name {
        "leak-resident" => Ok(FaultKind::LeakResident),
        other => bail!("unknown fault kind {other:?} (expected: leak-resident)"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# sample scenario
[run]
name=sample
seed=7
horizon=120
mode=inprocess

[profiles]
ladder=64,128

[profile/64]
oomguarpages_mib=60
vmguarpages_mib=64
privvmpages_barrier_mib=64
privvmpages_limit_mib=66

[profile/128]
oomguarpages_mib=100
vmguarpages_mib=128
privvmpages_barrier_mib=128
privvmpages_limit_mib=132

[node/bravo02]
ram_mib=2048
swap_mib=2048

[container/ct1891]
host=bravo02
profile=64

[container/ct1891/web]
start_servers=4
min_spare=2
max_spare=4
max_clients=128
keepalive=on
keepalive_timeout=5

[workload/ct1891]
threads=9
ramp_up=2
loop_count=5
requests_per_loop=8

[manager]
enabled=on
check_interval=12
frequency=10
overload-mem-default={'threshold':0.80}

[expectations]
failcount=0
";

    #[test]
    fn sample_scenario_parses() {
        let spec = parse_scenario_str(SAMPLE, "<test>", "fallback").unwrap();
        assert_eq!(spec.name, "sample");
        assert_eq!(spec.seed, 7);
        assert_eq!(spec.ladder, vec!["64".to_string(), "128".to_string()]);
        assert_eq!(spec.profiles.len(), 2);
        assert_eq!(spec.profile("64").unwrap().privvmpages_limit, 66 * 256);
        assert_eq!(spec.containers.len(), 1);
        let web = spec.containers[0].web_server.as_ref().unwrap();
        assert_eq!(web.start_servers, 4);
        assert_eq!(web.keepalive_timeout_ms, 5000);
        assert_eq!(spec.workloads[0].threads, 9);
        assert!(spec.manager.enabled);
        assert_eq!(spec.manager.sampling_period_s, 10);
        assert_eq!(spec.manager.mem_threshold, 0.80);
        assert_eq!(spec.expectations.get("failcount").map(String::as_str), Some("0"));
    }

    #[test]
    fn dangling_reference_fails_validation() {
        let broken = SAMPLE.replace("host=bravo02", "host=ghost");
        assert!(parse_scenario_str(&broken, "<test>", "x").is_err());
    }

    #[test]
    fn syntax_error_reports_location() {
        let err = parse_scenario_str("[run\nseed=1\n", "<test>", "x").unwrap_err();
        assert!(err.to_string().contains("<test>:1"));
    }
}
