//! Overload policy and resolver plug-ins: memory stress scoring from
//! beancounter snapshots, a one-step autoregressive CPU check, and the
//! resolution heuristic that raises limits, migrates or replicates.
//!
//! Plug-ins are registered under (resource key, policy id) pairs and
//! selected through the `active_policies` configuration option; resolver
//! plug-ins additionally carry a priority.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigTree, MapValue};
use crate::ubc::{Bound, MemoryProfile, ParamId, UbcTable};

pub type ContainerId = String;
pub type NodeId = String;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("{param} barrier is zero or unlimited; profile is misconfigured")]
    BarrierZero { param: &'static str },
    #[error("policy state has no threshold")]
    MissingThreshold,
}

/// Opaque, atomically replaceable policy tunables (a memento).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyState {
    values: BTreeMap<String, MapValue>,
}

impl PolicyState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(values: BTreeMap<String, MapValue>) -> Self {
        PolicyState { values }
    }

    pub fn with_threshold(threshold: f64) -> Self {
        let mut values = BTreeMap::new();
        values.insert("threshold".to_string(), MapValue::Decimal(threshold));
        PolicyState { values }
    }

    pub fn get(&self, key: &str) -> Option<&MapValue> {
        self.values.get(key)
    }

    pub fn number(&self, key: &str) -> Option<f64> {
        self.values.get(key).and_then(MapValue::as_f64)
    }

    pub fn threshold(&self) -> Result<f64, PolicyError> {
        self.number("threshold").ok_or(PolicyError::MissingThreshold)
    }
}

/// One stress indicator: its raw value and the normalized score in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreComponent {
    pub name: &'static str,
    pub raw: f64,
    pub normalized: f64,
}

/// The four-indicator memory stress score for one container. The overall
/// score is the greatest of the normalized components.
#[derive(Debug, Clone, PartialEq)]
pub struct StressScore {
    pub container_id: ContainerId,
    pub components: [ScoreComponent; 4],
    pub overall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Stressed,
    NotStressed,
}

impl Verdict {
    pub fn is_stressed(&self) -> bool {
        matches!(self, Verdict::Stressed)
    }
}

fn binary_score(raw: u64) -> f64 {
    if raw == 0 {
        0.0
    } else {
        1.0
    }
}

fn ratio_vs_barrier(numerator: u64, barrier: Bound, param: &'static str) -> Result<f64, PolicyError> {
    match barrier {
        Bound::Finite(b) if b > 0 => Ok(numerator as f64 / b as f64),
        _ => Err(PolicyError::BarrierZero { param }),
    }
}

/// Score a container's memory stress from two consecutive beancounter
/// snapshots:
///
/// 1. increase in `oomguarpages` failcnt, normalized to {0, 1};
/// 2. increase in `privvmpages` failcnt, normalized to {0, 1};
/// 3. memory actually used (`oomguarpages` held plus kernel memory and
///    socket buffers, in pages) over the `oomguarpages` barrier,
///    clamped to 1;
/// 4. `privvmpages` held over its barrier, clamped to 1.
pub fn mem_score(
    container_id: &str,
    prev: &UbcTable,
    curr: &UbcTable,
) -> Result<StressScore, PolicyError> {
    let oom_fail_delta = curr
        .get(ParamId::Oomguarpages)
        .failcnt
        .saturating_sub(prev.get(ParamId::Oomguarpages).failcnt);
    let priv_fail_delta = curr
        .get(ParamId::Privvmpages)
        .failcnt
        .saturating_sub(prev.get(ParamId::Privvmpages).failcnt);

    let usage_ratio = ratio_vs_barrier(
        curr.oom_usage_pages(),
        curr.get(ParamId::Oomguarpages).barrier,
        "oomguarpages",
    )?;
    let alloc_ratio = ratio_vs_barrier(
        curr.get(ParamId::Privvmpages).held,
        curr.get(ParamId::Privvmpages).barrier,
        "privvmpages",
    )?;

    let components = [
        ScoreComponent {
            name: "oomguarpages_failcnt",
            raw: oom_fail_delta as f64,
            normalized: binary_score(oom_fail_delta),
        },
        ScoreComponent {
            name: "privvmpages_failcnt",
            raw: priv_fail_delta as f64,
            normalized: binary_score(priv_fail_delta),
        },
        ScoreComponent {
            name: "memory_used_vs_guarantee",
            raw: usage_ratio,
            normalized: usage_ratio.min(1.0),
        },
        ScoreComponent {
            name: "allocated_vs_guarantee",
            raw: alloc_ratio,
            normalized: alloc_ratio.min(1.0),
        },
    ];
    let overall = components
        .iter()
        .map(|c| c.normalized)
        .fold(0.0f64, f64::max);
    Ok(StressScore {
        container_id: container_id.to_string(),
        components,
        overall,
    })
}

/// Stressed iff the overall score strictly exceeds the configured
/// threshold.
pub fn mem_overload_check(score: &StressScore, state: &PolicyState) -> Result<Verdict, PolicyError> {
    let threshold = state.threshold()?;
    Ok(if score.overall > threshold {
        Verdict::Stressed
    } else {
        Verdict::NotStressed
    })
}

/// One-step autoregression over a utilization window: fit `x̂ = a·x` by
/// least squares on consecutive pairs and predict from the latest sample.
/// Stressed iff the predicted remaining idle capacity falls below the
/// threshold. A window with fewer than two samples falls back to `a = 1`.
pub fn cpu_overload_check(history: &[f64], state: &PolicyState) -> Result<Verdict, PolicyError> {
    let threshold = state.threshold()?;
    let Some(&last) = history.last() else {
        return Ok(Verdict::NotStressed);
    };
    let coefficient = if history.len() < 2 {
        1.0
    } else {
        let mut num = 0.0;
        let mut den = 0.0;
        for pair in history.windows(2) {
            num += pair[0] * pair[1];
            den += pair[0] * pair[0];
        }
        if den == 0.0 {
            1.0
        } else {
            num / den
        }
    };
    let predicted = coefficient * last;
    Ok(if 1.0 - predicted < threshold {
        Verdict::Stressed
    } else {
        Verdict::NotStressed
    })
}

/// Node-level memory stress: resident usage over RAM strictly above the
/// threshold shared with the memory policy state.
pub fn node_mem_overloaded(
    resident_pages: u64,
    ram_pages: u64,
    state: &PolicyState,
) -> Result<Verdict, PolicyError> {
    let threshold = state.threshold()?;
    let ratio = if ram_pages == 0 {
        0.0
    } else {
        resident_pages as f64 / ram_pages as f64
    };
    Ok(if ratio > threshold {
        Verdict::Stressed
    } else {
        Verdict::NotStressed
    })
}

/// What a resolver decided to do about a stress situation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ResolverOutcome {
    RaisedLimits {
        container: ContainerId,
        profile: String,
    },
    MigrationRequested {
        container: ContainerId,
        target: NodeId,
        /// Profile to apply once the migration succeeds, when the
        /// migration was requested to make a limit raise possible.
        raise_after: Option<String>,
    },
    ReplicationRequested {
        container: ContainerId,
        target: NodeId,
    },
    Unresolved,
}

/// Immutable cluster snapshot the resolvers decide over.
#[derive(Debug, Clone, Default)]
pub struct ClusterView {
    pub nodes: BTreeMap<NodeId, NodeView>,
    pub containers: BTreeMap<ContainerId, ContainerView>,
    /// Profile ladder in ascending order; a limit raise moves one rung.
    pub ladder: Vec<MemoryProfile>,
    pub replication_enabled: bool,
    /// Group utilization level beyond which a new replica is started.
    pub replication_threshold: f64,
}

#[derive(Debug, Clone)]
pub struct NodeView {
    pub ram_pages: u64,
    pub swap_pages: u64,
    pub resident_pages: u64,
    pub busy_with_transfer: bool,
}

#[derive(Debug, Clone)]
pub struct ContainerView {
    pub host: NodeId,
    pub profile: String,
    pub guarantee_pages: u64,
    pub oom_usage_pages: u64,
    pub oom_barrier_pages: u64,
    pub resident_pages: u64,
    pub replica_group: Option<String>,
}

impl ClusterView {
    fn profile_index(&self, name: &str) -> Option<usize> {
        self.ladder.iter().position(|p| p.name == name)
    }

    fn profile_guarantee(profile: &MemoryProfile) -> u64 {
        profile.vmguarpages_barrier.max(profile.oomguarpages_barrier)
    }

    /// Guarantees committed to containers hosted on `node`.
    pub fn committed_pages(&self, node: &str) -> u64 {
        self.containers
            .values()
            .filter(|c| c.host == node)
            .map(|c| c.guarantee_pages)
            .sum()
    }

    /// Memory not yet promised to anyone on `node`.
    pub fn uncommitted_pages(&self, node: &str) -> u64 {
        let Some(view) = self.nodes.get(node) else {
            return 0;
        };
        (view.ram_pages + view.swap_pages).saturating_sub(self.committed_pages(node))
    }

    fn replica_group_members(&self, container: &ContainerView) -> Vec<&ContainerView> {
        match &container.replica_group {
            None => Vec::new(),
            Some(group) => self
                .containers
                .values()
                .filter(|c| c.replica_group.as_deref() == Some(group))
                .collect(),
        }
    }
}

fn utilization(container: &ContainerView) -> f64 {
    if container.oom_barrier_pages == 0 {
        0.0
    } else {
        container.oom_usage_pages as f64 / container.oom_barrier_pages as f64
    }
}

/// Pick the registered node with the most uncommitted memory that still
/// covers `needed_pages`, excluding `exclude`. Ties go to the smallest
/// node id.
fn best_target(view: &ClusterView, needed_pages: u64, exclude: &str) -> Option<NodeId> {
    let mut best: Option<(u64, &NodeId)> = None;
    for node_id in view.nodes.keys() {
        if node_id == exclude {
            continue;
        }
        let free = view.uncommitted_pages(node_id);
        if free < needed_pages {
            continue;
        }
        if best.map_or(true, |(best_free, _)| free > best_free) {
            best = Some((free, node_id));
        }
    }
    best.map(|(_, id)| id.clone())
}

/// Resolve a stressed container. In order: raise the limits locally if the
/// host's uncommitted memory covers the next rung of the profile ladder;
/// otherwise migrate to a node with enough free memory for the raise;
/// otherwise give up. When replication is enabled and every member of the
/// container's replica group is running above the replication threshold, a
/// new replica is started instead.
pub fn mem_resolve(
    container_id: &str,
    view: &ClusterView,
    _state: &PolicyState,
) -> ResolverOutcome {
    let Some(container) = view.containers.get(container_id) else {
        return ResolverOutcome::Unresolved;
    };

    if view.replication_enabled {
        let members = view.replica_group_members(container);
        if !members.is_empty()
            && members
                .iter()
                .all(|m| utilization(m) > view.replication_threshold)
        {
            if let Some(target) =
                best_target(view, container.guarantee_pages, "") // any node may host the replica
            {
                return ResolverOutcome::ReplicationRequested {
                    container: container_id.to_string(),
                    target,
                };
            }
        }
    }

    let Some(index) = view.profile_index(&container.profile) else {
        return ResolverOutcome::Unresolved;
    };
    let Some(next) = view.ladder.get(index + 1) else {
        // Top of the ladder: there is nothing to raise to, locally or
        // after a migration.
        return ResolverOutcome::Unresolved;
    };
    let next_guarantee = ClusterView::profile_guarantee(next);
    let step = next_guarantee.saturating_sub(container.guarantee_pages);

    if view.uncommitted_pages(&container.host) >= step {
        return ResolverOutcome::RaisedLimits {
            container: container_id.to_string(),
            profile: next.name.clone(),
        };
    }

    if let Some(target) = best_target(view, next_guarantee, &container.host) {
        return ResolverOutcome::MigrationRequested {
            container: container_id.to_string(),
            target,
            raise_after: Some(next.name.clone()),
        };
    }

    ResolverOutcome::Unresolved
}

/// Resolve a stressed node: walk its containers in decreasing resource
/// usage and migrate the first whose move does not push any target node
/// past the stress threshold.
pub fn node_resolve(node_id: &str, view: &ClusterView, state: &PolicyState) -> ResolverOutcome {
    let Ok(threshold) = state.threshold() else {
        return ResolverOutcome::Unresolved;
    };
    let mut hosted: Vec<(&ContainerId, &ContainerView)> = view
        .containers
        .iter()
        .filter(|(_, c)| c.host == node_id)
        .collect();
    // Largest usage first; container id breaks ties.
    hosted.sort_by(|a, b| b.1.oom_usage_pages.cmp(&a.1.oom_usage_pages).then(a.0.cmp(b.0)));

    for (container_id, container) in hosted {
        let mut candidates: Vec<(&NodeId, &NodeView)> = view
            .nodes
            .iter()
            .filter(|(id, _)| id.as_str() != node_id)
            .collect();
        candidates.sort_by(|a, b| {
            let free_a = a.1.ram_pages.saturating_sub(a.1.resident_pages);
            let free_b = b.1.ram_pages.saturating_sub(b.1.resident_pages);
            free_b.cmp(&free_a).then(a.0.cmp(b.0))
        });
        for (target_id, target) in candidates {
            if target.ram_pages == 0 {
                continue;
            }
            let after = (target.resident_pages + container.resident_pages) as f64
                / target.ram_pages as f64;
            if after <= threshold {
                return ResolverOutcome::MigrationRequested {
                    container: container_id.clone(),
                    target: target_id.clone(),
                    raise_after: None,
                };
            }
        }
    }
    ResolverOutcome::Unresolved
}

/// Per-sample view of one container, as collected by the sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerSample {
    pub timestamp_ms: u64,
    pub ubc: UbcTable,
}

/// Per-sample view of one hardware node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSample {
    pub timestamp_ms: u64,
    pub ram_pages: u64,
    pub swap_pages: u64,
    pub resident_pages: u64,
    pub swap_used_pages: u64,
    pub cpu_used: f64,
}

/// An overload policy plug-in. Implementations judge containers and nodes
/// from their recent observation windows. Windows are ordered oldest
/// first and never empty.
pub trait OverloadPolicy {
    fn check_container(
        &self,
        container_id: &str,
        window: &[ContainerSample],
        state: &PolicyState,
    ) -> Result<Verdict, PolicyError>;

    fn check_node(
        &self,
        node_id: &str,
        window: &[NodeSample],
        state: &PolicyState,
    ) -> Result<Verdict, PolicyError>;
}

/// The default memory overload policy.
pub struct MemOverloadPolicy;

impl OverloadPolicy for MemOverloadPolicy {
    fn check_container(
        &self,
        container_id: &str,
        window: &[ContainerSample],
        state: &PolicyState,
    ) -> Result<Verdict, PolicyError> {
        let Some(curr) = window.last() else {
            return Ok(Verdict::NotStressed);
        };
        // With a single observation no failcnt delta exists yet; the
        // usage components still apply.
        let prev = if window.len() >= 2 {
            &window[window.len() - 2]
        } else {
            curr
        };
        let score = mem_score(container_id, &prev.ubc, &curr.ubc)?;
        mem_overload_check(&score, state)
    }

    fn check_node(
        &self,
        _node_id: &str,
        window: &[NodeSample],
        state: &PolicyState,
    ) -> Result<Verdict, PolicyError> {
        let Some(last) = window.last() else {
            return Ok(Verdict::NotStressed);
        };
        node_mem_overloaded(last.resident_pages, last.ram_pages, state)
    }
}

/// First-order autoregressive CPU overload policy. Containers carry no
/// CPU series in the observations, so only nodes are judged.
pub struct CpuAr1Policy;

impl OverloadPolicy for CpuAr1Policy {
    fn check_container(
        &self,
        _container_id: &str,
        _window: &[ContainerSample],
        _state: &PolicyState,
    ) -> Result<Verdict, PolicyError> {
        Ok(Verdict::NotStressed)
    }

    fn check_node(
        &self,
        _node_id: &str,
        window: &[NodeSample],
        state: &PolicyState,
    ) -> Result<Verdict, PolicyError> {
        let series: Vec<f64> = window.iter().map(|s| s.cpu_used).collect();
        cpu_overload_check(&series, state)
    }
}

/// An overload resolver plug-in.
pub trait OverloadResolver {
    fn resolve_container(
        &self,
        container_id: &str,
        view: &ClusterView,
        state: &PolicyState,
    ) -> ResolverOutcome {
        let _ = (container_id, view, state);
        ResolverOutcome::Unresolved
    }

    fn resolve_node(
        &self,
        node_id: &str,
        view: &ClusterView,
        state: &PolicyState,
    ) -> ResolverOutcome {
        let _ = (node_id, view, state);
        ResolverOutcome::Unresolved
    }
}

/// The default memory overload resolver.
pub struct MemOverloadResolver;

impl OverloadResolver for MemOverloadResolver {
    fn resolve_container(
        &self,
        container_id: &str,
        view: &ClusterView,
        state: &PolicyState,
    ) -> ResolverOutcome {
        mem_resolve(container_id, view, state)
    }

    fn resolve_node(&self, node_id: &str, view: &ClusterView, state: &PolicyState) -> ResolverOutcome {
        node_resolve(node_id, view, state)
    }
}

/// Repository of overload policy plug-ins keyed by (resource, id), with
/// one active policy per resource and a state memento per plug-in.
#[derive(Default)]
pub struct PolicyRepository {
    policies: BTreeMap<(String, String), Box<dyn OverloadPolicy>>,
    states: BTreeMap<(String, String), PolicyState>,
    active: BTreeMap<String, String>,
}

impl PolicyRepository {
    pub fn new() -> Self {
        Self::default()
    }

    /// The built-in plug-in set.
    pub fn with_builtin_plugins() -> Self {
        let mut repo = Self::new();
        repo.register("mem", "default", Box::new(MemOverloadPolicy));
        repo.register("cpu", "auto_regressive_order_1", Box::new(CpuAr1Policy));
        repo
    }

    pub fn register(&mut self, resource: &str, id: &str, policy: Box<dyn OverloadPolicy>) {
        self.policies
            .insert((resource.to_string(), id.to_string()), policy);
    }

    pub fn set_active(&mut self, resource: &str, id: &str) {
        self.active.insert(resource.to_string(), id.to_string());
    }

    pub fn set_policy_state(&mut self, resource: &str, id: &str, state: PolicyState) {
        self.states
            .insert((resource.to_string(), id.to_string()), state);
    }

    pub fn policy_state(&self, resource: &str, id: &str) -> PolicyState {
        self.states
            .get(&(resource.to_string(), id.to_string()))
            .cloned()
            .unwrap_or_default()
    }

    /// Active resources in deterministic order.
    pub fn active_resources(&self) -> Vec<String> {
        self.active.keys().cloned().collect()
    }

    pub fn active_policy(&self, resource: &str) -> Option<(&dyn OverloadPolicy, PolicyState)> {
        let id = self.active.get(resource)?;
        let policy = self.policies.get(&(resource.to_string(), id.clone()))?;
        Some((policy.as_ref(), self.policy_state(resource, id)))
    }

    /// Initialize active selections and policy states from the
    /// configuration sections the config-backed state loader reads.
    pub fn load_from_config(&mut self, tree: &ConfigTree) {
        if let Some(active) = tree.get_map("server/policy/overload", "active_policies") {
            for (resource, id) in active {
                if let Some(id) = id.as_str() {
                    self.set_active(resource, id);
                }
            }
        }
        if let Some(section) = tree.section("server/policy/state") {
            for (option, value) in section {
                let Some(rest) = option.strip_prefix("overload-") else {
                    continue;
                };
                let Some((resource, id)) = rest.split_once('-') else {
                    continue;
                };
                if let Some(map) = value.as_map() {
                    self.set_policy_state(resource, id, PolicyState::from_map(map.clone()));
                }
            }
        }
    }
}

/// A resolver registration: plug-in plus its priority.
pub struct ResolverRegistration {
    pub resource: String,
    pub id: String,
    pub priority: i32,
    pub resolver: Box<dyn OverloadResolver>,
}

/// Repository of overload resolver plug-ins. For a stressed entity the
/// resolvers for its resource run in nonincreasing priority order;
/// registration order breaks ties.
#[derive(Default)]
pub struct ResolverRepository {
    entries: Vec<ResolverRegistration>,
}

impl ResolverRepository {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtin_plugins() -> Self {
        let mut repo = Self::new();
        repo.register("mem", "default", 10, Box::new(MemOverloadResolver));
        repo
    }

    pub fn register(
        &mut self,
        resource: &str,
        id: &str,
        priority: i32,
        resolver: Box<dyn OverloadResolver>,
    ) {
        self.entries.push(ResolverRegistration {
            resource: resource.to_string(),
            id: id.to_string(),
            priority,
            resolver,
        });
    }

    /// Resolvers for `resource`, highest priority first, stable for equal
    /// priorities.
    pub fn resolvers_for(&self, resource: &str) -> Vec<&ResolverRegistration> {
        let mut matching: Vec<&ResolverRegistration> = self
            .entries
            .iter()
            .filter(|e| e.resource == resource)
            .collect();
        matching.sort_by_key(|e| std::cmp::Reverse(e.priority));
        matching
    }
}
