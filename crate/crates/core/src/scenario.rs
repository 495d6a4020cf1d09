//! Structured description of a simulation run: nodes, profiles,
//! containers, workloads, manager settings and calibration tunables. The
//! CLI front-end parses scenario files into this form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::simkernel::{PreforkConfig, WorkloadSpec};
use crate::ubc::{mib_to_pages, MemoryProfile};
use crate::wire::Credentials;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    InProcess,
    Networked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub ram_mib: u64,
    pub swap_mib: u64,
}

impl NodeSpec {
    pub fn ram_pages(&self) -> u64 {
        mib_to_pages(self.ram_mib)
    }

    pub fn swap_pages(&self) -> u64 {
        mib_to_pages(self.swap_mib)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub id: String,
    pub host: String,
    pub profile: String,
    pub web_server: Option<PreforkConfig>,
    pub replica_group: Option<String>,
}

/// Manager settings: whether the control loop runs, how it talks to the
/// agents, and the policy tunables layered over the packaged defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagerSpec {
    pub enabled: bool,
    pub check_interval_s: u64,
    /// Client sampling period in seconds (the `frequency` option).
    pub sampling_period_s: u64,
    pub mem_threshold: f64,
    pub cpu_threshold: f64,
    pub replication_enabled: bool,
    pub replication_threshold: f64,
    pub credentials: Credentials,
}

impl Default for ManagerSpec {
    fn default() -> Self {
        ManagerSpec {
            enabled: false,
            check_interval_s: 12,
            sampling_period_s: 2,
            mem_threshold: 0.80,
            cpu_threshold: 0.10,
            replication_enabled: false,
            replication_threshold: 0.75,
            credentials: Credentials {
                username: "agent".to_string(),
                password: "agent-secret".to_string(),
            },
        }
    }
}

/// Calibration constants for the container memory model. Worker sizes
/// follow the observed footprint of a LAMP stack: a container's base
/// daemons touch about 6 MiB, the database and web server add about
/// 30 MiB, and each worker shows 20 MiB virtual when fresh and 30 MiB
/// once it has served dynamic pages, most of it shared program text.
/// Only the private share is charged per worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTunables {
    pub container_base_mib: u64,
    pub services_mib: u64,
    pub worker_fresh_virtual_mib: u64,
    pub worker_warm_virtual_mib: u64,
    /// Fraction of a worker's image shared between processes.
    pub shared_fraction: f64,
    pub error_response_ms: u64,
    pub kmem_per_process_bytes: u64,
    /// Socket buffer bytes charged per direction for a bound connection.
    pub conn_buf_bytes: u64,
    /// Size of the in-container process a live migration spawns.
    pub checkpoint_pages: u64,
    pub transfer_rate_pages_per_s: u64,
    pub cpu_share_per_busy_worker: f64,
}

impl Default for SimTunables {
    fn default() -> Self {
        SimTunables {
            container_base_mib: 6,
            services_mib: 30,
            worker_fresh_virtual_mib: 20,
            worker_warm_virtual_mib: 30,
            shared_fraction: 0.85,
            error_response_ms: 40,
            kmem_per_process_bytes: 24 * 1024,
            conn_buf_bytes: 8 * 1024,
            checkpoint_pages: 1024,
            transfer_rate_pages_per_s: 4096,
            cpu_share_per_busy_worker: 0.02,
        }
    }
}

impl SimTunables {
    /// Private pages charged when a worker is forked.
    pub fn worker_fresh_private_pages(&self) -> u64 {
        let private = (1.0 - self.shared_fraction) * self.worker_fresh_virtual_mib as f64;
        (private * 256.0).round() as u64
    }

    /// Private pages of a worker that has served dynamic pages.
    pub fn worker_warm_private_pages(&self) -> u64 {
        let private = (1.0 - self.shared_fraction) * self.worker_warm_virtual_mib as f64;
        (private * 256.0).round() as u64
    }

    pub fn worker_growth_pages(&self) -> u64 {
        self.worker_warm_private_pages()
            .saturating_sub(self.worker_fresh_private_pages())
    }
}

/// Faults the runner can inject to prove the run-time checks are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    /// Grow a node's resident counter without backing accounting.
    LeakResident,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    pub horizon_s: u64,
    pub mode: RunMode,
    pub nodes: Vec<NodeSpec>,
    /// Every profile the scenario defines.
    pub profiles: Vec<MemoryProfile>,
    /// Names of the profiles forming the raise ladder, in ascending
    /// order. Empty means every profile, in listed order.
    pub ladder: Vec<String>,
    pub containers: Vec<ContainerSpec>,
    pub workloads: Vec<WorkloadSpec>,
    pub manager: ManagerSpec,
    pub tunables: SimTunables,
    /// Declared cross-run expectations, carried into run artifacts for
    /// the compare command.
    pub expectations: BTreeMap<String, String>,
    pub inject_fault: Option<FaultKind>,
}

impl ScenarioSpec {
    pub fn new(name: &str) -> Self {
        ScenarioSpec {
            name: name.to_string(),
            seed: 42,
            horizon_s: 300,
            mode: RunMode::InProcess,
            nodes: Vec::new(),
            profiles: Vec::new(),
            ladder: Vec::new(),
            containers: Vec::new(),
            workloads: Vec::new(),
            manager: ManagerSpec::default(),
            tunables: SimTunables::default(),
            expectations: BTreeMap::new(),
            inject_fault: None,
        }
    }

    pub fn profile(&self, name: &str) -> Option<&MemoryProfile> {
        self.profiles.iter().find(|p| p.name == name)
    }

    /// The raise ladder as profiles, in order.
    pub fn ladder_profiles(&self) -> Vec<MemoryProfile> {
        if self.ladder.is_empty() {
            return self.profiles.clone();
        }
        self.ladder
            .iter()
            .filter_map(|name| self.profile(name).cloned())
            .collect()
    }

    /// Structural validation: every reference must resolve and every
    /// workload must target a web-serving container.
    pub fn validate(&self) -> Result<Vec<String>, String> {
        let mut warnings = Vec::new();
        if self.nodes.is_empty() {
            return Err("scenario defines no nodes".to_string());
        }
        for profile in &self.profiles {
            match profile.validate() {
                Ok(mut w) => warnings.append(&mut w),
                Err(e) => return Err(e.to_string()),
            }
        }
        for name in &self.ladder {
            if self.profile(name).is_none() {
                return Err(format!("ladder references unknown profile {name}"));
            }
        }
        for container in &self.containers {
            if !self.nodes.iter().any(|n| n.id == container.host) {
                return Err(format!(
                    "container {} references unknown host {}",
                    container.id, container.host
                ));
            }
            if self.profile(&container.profile).is_none() {
                return Err(format!(
                    "container {} references unknown profile {}",
                    container.id, container.profile
                ));
            }
        }
        for workload in &self.workloads {
            let Some(target) = self.containers.iter().find(|c| c.id == workload.target) else {
                return Err(format!(
                    "workload targets unknown container {}",
                    workload.target
                ));
            };
            if target.web_server.is_none() {
                return Err(format!("workload target {} has no web server", target.id));
            }
            if workload.threads == 0 || workload.requests_per_loop == 0 {
                return Err("workload thread group is empty".to_string());
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for container in &self.containers {
            if !seen.insert(&container.id) {
                return Err(format!("duplicate container id {}", container.id));
            }
        }
        Ok(warnings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ScenarioSpec {
        let mut spec = ScenarioSpec::new("t");
        spec.nodes.push(NodeSpec {
            id: "n1".to_string(),
            ram_mib: 2048,
            swap_mib: 2048,
        });
        spec.profiles
            .push(MemoryProfile::from_mib("64", 60, 64, 64, 66));
        spec.containers.push(ContainerSpec {
            id: "ct".to_string(),
            host: "n1".to_string(),
            profile: "64".to_string(),
            web_server: Some(PreforkConfig::default()),
            replica_group: None,
        });
        spec.workloads.push(WorkloadSpec {
            target: "ct".to_string(),
            ..WorkloadSpec::default()
        });
        spec
    }

    #[test]
    fn minimal_scenario_validates() {
        assert!(minimal().validate().unwrap().is_empty());
    }

    #[test]
    fn dangling_references_are_rejected() {
        let mut spec = minimal();
        spec.containers[0].host = "ghost".to_string();
        assert!(spec.validate().is_err());

        let mut spec = minimal();
        spec.workloads[0].target = "ghost".to_string();
        assert!(spec.validate().is_err());

        let mut spec = minimal();
        spec.containers[0].web_server = None;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn worker_private_share_calibration() {
        let t = SimTunables::default();
        // 15% of 20 MiB = 3 MiB fresh, 15% of 30 MiB = 4.5 MiB warm.
        assert_eq!(t.worker_fresh_private_pages(), 768);
        assert_eq!(t.worker_warm_private_pages(), 1152);
        assert_eq!(t.worker_growth_pages(), 384);
        // Base + services + parent + four warm workers lands in the
        // observed 50-60 MiB band.
        let total_mib = t.container_base_mib
            + t.services_mib
            + (t.worker_fresh_private_pages() + 4 * t.worker_warm_private_pages()) / 256;
        assert!((50..=60).contains(&total_mib), "total {total_mib} MiB");
    }
}
