//! Server-side control loop: the node data hierarchy storing load
//! observations, periodic stress checks through the policy repositories,
//! resolver priority ordering, and the actlater queue that serializes
//! migration and replication requests.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ConfigTree;
use crate::policy::{
    ClusterView, ContainerId, ContainerSample, ContainerView, NodeId, NodeSample, NodeView,
    PolicyRepository, ResolverOutcome, ResolverRepository, Verdict,
};
use crate::ubc::{Bound, MemoryProfile, ParamId};

pub type RequestId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("node {0} is not registered")]
    UnknownNode(String),
}

/// A timestamped snapshot of one node's and its containers' resource
/// usage, sent client → server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadObservation {
    pub timestamp_ms: u64,
    pub node_id: NodeId,
    pub node: NodeSample,
    pub containers: BTreeMap<ContainerId, ContainerSample>,
}

/// Ring of recent observations for one container.
#[derive(Debug, Default, Clone)]
pub struct ContainerEntry {
    samples: Vec<ContainerSample>,
}

impl ContainerEntry {
    pub fn samples(&self) -> &[ContainerSample] {
        &self.samples
    }

    pub fn latest(&self) -> Option<&ContainerSample> {
        self.samples.last()
    }
}

/// One hardware node in the hierarchy: its static capacities plus the
/// ring of node-level samples and the hosted containers.
#[derive(Debug, Clone)]
pub struct NodeEntry {
    pub ram_pages: u64,
    pub swap_pages: u64,
    samples: Vec<NodeSample>,
    containers: BTreeMap<ContainerId, ContainerEntry>,
}

impl NodeEntry {
    pub fn samples(&self) -> &[NodeSample] {
        &self.samples
    }

    pub fn latest(&self) -> Option<&NodeSample> {
        self.samples.last()
    }

    pub fn containers(&self) -> &BTreeMap<ContainerId, ContainerEntry> {
        &self.containers
    }
}

/// Visitor over the datacentre → node → container hierarchy. Callbacks
/// see entries, never the backing storage.
pub trait HierarchyVisitor {
    fn enter_datacentre(&mut self) {}
    fn leave_datacentre(&mut self) {}
    fn enter_node(&mut self, _node_id: &str, _node: &NodeEntry) {}
    fn leave_node(&mut self, _node_id: &str) {}
    fn visit_container(&mut self, _container_id: &str, _container: &ContainerEntry) {}
}

/// The monitor's data structure paralleling the physical hardware. Each
/// entity keeps a bounded ring of observations; the oldest are discarded
/// first.
#[derive(Debug, Clone)]
pub struct NodeHierarchy {
    capacity: usize,
    nodes: BTreeMap<NodeId, NodeEntry>,
}

impl NodeHierarchy {
    pub fn new(max_in_memory_observations: usize) -> Self {
        NodeHierarchy {
            capacity: max_in_memory_observations.max(1),
            nodes: BTreeMap::new(),
        }
    }

    pub fn register_node(&mut self, node_id: &str, ram_pages: u64, swap_pages: u64) {
        self.nodes.entry(node_id.to_string()).or_insert(NodeEntry {
            ram_pages,
            swap_pages,
            samples: Vec::new(),
            containers: BTreeMap::new(),
        });
    }

    pub fn node(&self, node_id: &str) -> Option<&NodeEntry> {
        self.nodes.get(node_id)
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, NodeEntry> {
        &self.nodes
    }

    /// Append an observation to the matching rings, trimming them to
    /// capacity. A container reported by a node it was not previously
    /// under moves there, keeping its ring.
    pub fn record_observation(&mut self, obs: &LoadObservation) -> Result<(), ControlError> {
        if !self.nodes.contains_key(&obs.node_id) {
            return Err(ControlError::UnknownNode(obs.node_id.clone()));
        }

        for container_id in obs.containers.keys() {
            let elsewhere = self
                .nodes
                .iter()
                .find(|(node_id, entry)| {
                    **node_id != obs.node_id && entry.containers.contains_key(container_id)
                })
                .map(|(node_id, _)| node_id.clone());
            if let Some(old_node) = elsewhere {
                let entry = self
                    .nodes
                    .get_mut(&old_node)
                    .unwrap()
                    .containers
                    .remove(container_id)
                    .unwrap();
                self.nodes
                    .get_mut(&obs.node_id)
                    .unwrap()
                    .containers
                    .insert(container_id.clone(), entry);
            }
        }

        let node = self.nodes.get_mut(&obs.node_id).unwrap();
        node.samples.push(obs.node.clone());
        if node.samples.len() > self.capacity {
            node.samples.remove(0);
        }
        for (container_id, sample) in &obs.containers {
            let entry = node.containers.entry(container_id.clone()).or_default();
            entry.samples.push(sample.clone());
            if entry.samples.len() > self.capacity {
                entry.samples.remove(0);
            }
        }
        Ok(())
    }

    /// Depth-first traversal with enter/leave callbacks.
    pub fn visit(&self, visitor: &mut dyn HierarchyVisitor) {
        visitor.enter_datacentre();
        for (node_id, node) in &self.nodes {
            visitor.enter_node(node_id, node);
            for (container_id, container) in &node.containers {
                visitor.visit_container(container_id, container);
            }
            visitor.leave_node(node_id);
        }
        visitor.leave_datacentre();
    }
}

/// A command from the monitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    AdjustUbc,
    Migrate,
    Replicate,
}

impl ActionKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActionKind::AdjustUbc => "adjust_ubc",
            ActionKind::Migrate => "migrate",
            ActionKind::Replicate => "replicate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRequest {
    pub request_id: RequestId,
    pub kind: ActionKind,
    pub container_id: ContainerId,
    pub source: NodeId,
    pub target: Option<NodeId>,
    /// Profile name for adjustments, image id for replications.
    pub payload: Option<String>,
}

/// Lifecycle notification for a queued transfer.
#[derive(Debug, Clone, PartialEq)]
pub enum TransferNotice {
    Started(ActionRequest),
    Succeeded(ActionRequest),
    Failed(ActionRequest, String),
}

/// Observer interface for migration/replication lifecycle events.
pub trait TransferObserver {
    fn started(&mut self, _req: &ActionRequest) {}
    fn succeeded(&mut self, _req: &ActionRequest) {}
    fn failed(&mut self, _req: &ActionRequest, _reason: &str) {}
}

/// FIFO queue for migration and replication requests. Requests are
/// executed strictly in submission order, one at a time; a held front
/// request is never overtaken by requests behind it, even when those
/// touch only free nodes. Adjustment requests bypass this queue entirely.
#[derive(Default)]
pub struct ActLater {
    queue: VecDeque<ActionRequest>,
    in_flight: Option<ActionRequest>,
    busy_nodes: BTreeSet<NodeId>,
    observers: Vec<Box<dyn TransferObserver>>,
    notices: Vec<TransferNotice>,
}

impl ActLater {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_observer(&mut self, observer: Box<dyn TransferObserver>) {
        self.observers.push(observer);
    }

    pub fn submit(&mut self, req: ActionRequest) {
        debug_assert!(req.kind != ActionKind::AdjustUbc, "adjustments are not queued");
        self.queue.push_back(req);
    }

    /// Dispatch the front request if nothing is in flight and its nodes
    /// are free. Returns the request the caller must now execute.
    pub fn pump(&mut self) -> Option<ActionRequest> {
        if self.in_flight.is_some() {
            return None;
        }
        let front = self.queue.front()?;
        if self.busy_nodes.contains(&front.source)
            || front
                .target
                .as_ref()
                .is_some_and(|t| self.busy_nodes.contains(t))
        {
            return None;
        }
        let req = self.queue.pop_front().unwrap();
        self.busy_nodes.insert(req.source.clone());
        if let Some(target) = &req.target {
            self.busy_nodes.insert(target.clone());
        }
        self.in_flight = Some(req.clone());
        for obs in &mut self.observers {
            obs.started(&req);
        }
        self.notices.push(TransferNotice::Started(req.clone()));
        Some(req)
    }

    /// Terminal outcome for the in-flight request.
    pub fn complete(&mut self, request_id: RequestId, outcome: Result<(), String>) {
        let in_flight_matches = self
            .in_flight
            .as_ref()
            .is_some_and(|r| r.request_id == request_id);
        debug_assert!(in_flight_matches, "completion for unknown request {request_id}");
        if !in_flight_matches {
            return;
        }
        let req = self.in_flight.take().unwrap();
        self.busy_nodes.remove(&req.source);
        if let Some(target) = &req.target {
            self.busy_nodes.remove(target);
        }
        match outcome {
            Ok(()) => {
                for obs in &mut self.observers {
                    obs.succeeded(&req);
                }
                self.notices.push(TransferNotice::Succeeded(req));
            }
            Err(reason) => {
                for obs in &mut self.observers {
                    obs.failed(&req, &reason);
                }
                self.notices.push(TransferNotice::Failed(req, reason));
            }
        }
    }

    pub fn drain_notices(&mut self) -> Vec<TransferNotice> {
        std::mem::take(&mut self.notices)
    }

    pub fn is_node_busy(&self, node_id: &str) -> bool {
        self.busy_nodes.contains(node_id)
    }

    /// Containers with a queued or in-flight transfer.
    pub fn pending_containers(&self) -> BTreeSet<ContainerId> {
        let mut set: BTreeSet<ContainerId> = self
            .queue
            .iter()
            .map(|r| r.container_id.clone())
            .collect();
        if let Some(req) = &self.in_flight {
            set.insert(req.container_id.clone());
        }
        set
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn in_flight(&self) -> Option<&ActionRequest> {
        self.in_flight.as_ref()
    }
}

/// The monitor: receives load observations, runs periodic stress checks
/// through the active overload policies and, for stressed entities, runs
/// the resolvers in priority order and turns their outcomes into action
/// requests. Adjustments are issued immediately; transfers go through the
/// actlater queue.
pub struct Monitor {
    pub hierarchy: NodeHierarchy,
    pub policies: PolicyRepository,
    pub resolvers: ResolverRepository,
    pub actlater: ActLater,
    check_interval_ms: u64,
    next_request_id: RequestId,
    ladder: Vec<MemoryProfile>,
    container_profiles: BTreeMap<ContainerId, String>,
    replica_groups: BTreeMap<ContainerId, String>,
    replication_enabled: bool,
    replication_threshold: f64,
    /// Profile to apply once the keyed migration succeeds.
    pending_raises: BTreeMap<RequestId, (ContainerId, String)>,
}

impl Monitor {
    pub fn from_config(tree: &ConfigTree) -> Self {
        let capacity = tree
            .get_i64("server/data", "max_in_memory_observations")
            .unwrap_or(20) as usize;
        let check_interval_s = tree
            .get_i64("server/policy/overload", "check_interval")
            .unwrap_or(12) as u64;
        let mut policies = PolicyRepository::with_builtin_plugins();
        policies.load_from_config(tree);
        Monitor {
            hierarchy: NodeHierarchy::new(capacity),
            policies,
            resolvers: ResolverRepository::with_builtin_plugins(),
            actlater: ActLater::new(),
            check_interval_ms: check_interval_s * 1000,
            next_request_id: 1,
            ladder: Vec::new(),
            container_profiles: BTreeMap::new(),
            replica_groups: BTreeMap::new(),
            replication_enabled: false,
            replication_threshold: 0.75,
            pending_raises: BTreeMap::new(),
        }
    }

    pub fn set_ladder(&mut self, ladder: Vec<MemoryProfile>) {
        self.ladder = ladder;
    }

    pub fn ladder(&self) -> &[MemoryProfile] {
        &self.ladder
    }

    pub fn set_replication(&mut self, enabled: bool, threshold: f64) {
        self.replication_enabled = enabled;
        self.replication_threshold = threshold;
    }

    pub fn check_interval_ms(&self) -> u64 {
        self.check_interval_ms
    }

    pub fn set_check_interval_s(&mut self, seconds: u64) {
        self.check_interval_ms = seconds * 1000;
    }

    pub fn register_node(&mut self, node_id: &str, ram_pages: u64, swap_pages: u64) {
        self.hierarchy.register_node(node_id, ram_pages, swap_pages);
    }

    /// Record which profile rung a container currently sits on.
    pub fn set_container_profile(&mut self, container_id: &str, profile: &str) {
        self.container_profiles
            .insert(container_id.to_string(), profile.to_string());
    }

    pub fn container_profile(&self, container_id: &str) -> Option<&String> {
        self.container_profiles.get(container_id)
    }

    pub fn set_replica_group(&mut self, container_id: &str, group: &str) {
        self.replica_groups
            .insert(container_id.to_string(), group.to_string());
    }

    pub fn on_observation(&mut self, obs: &LoadObservation) -> Result<(), ControlError> {
        self.hierarchy.record_observation(obs)
    }

    fn allocate_request_id(&mut self) -> RequestId {
        let id = self.next_request_id;
        self.next_request_id += 1;
        id
    }

    /// Snapshot the hierarchy's latest samples into the view the
    /// resolvers decide over.
    pub fn cluster_view(&self) -> ClusterView {
        let mut view = ClusterView {
            replication_enabled: self.replication_enabled,
            replication_threshold: self.replication_threshold,
            ladder: self.ladder.clone(),
            ..Default::default()
        };
        struct Collector<'a> {
            monitor: &'a Monitor,
            view: &'a mut ClusterView,
            current_node: NodeId,
        }
        impl HierarchyVisitor for Collector<'_> {
            fn enter_node(&mut self, node_id: &str, node: &NodeEntry) {
                self.current_node = node_id.to_string();
                let latest = node.latest();
                self.view.nodes.insert(
                    node_id.to_string(),
                    NodeView {
                        ram_pages: node.ram_pages,
                        swap_pages: node.swap_pages,
                        resident_pages: latest.map_or(0, |s| s.resident_pages),
                        busy_with_transfer: self.monitor.actlater.is_node_busy(node_id),
                    },
                );
            }
            fn visit_container(&mut self, container_id: &str, container: &ContainerEntry) {
                let Some(sample) = container.latest() else {
                    return;
                };
                let profile = self
                    .monitor
                    .container_profiles
                    .get(container_id)
                    .cloned()
                    .unwrap_or_default();
                let oom_barrier = match sample.ubc.get(ParamId::Oomguarpages).barrier {
                    Bound::Finite(v) => v,
                    Bound::Unlimited => 0,
                };
                self.view.containers.insert(
                    container_id.to_string(),
                    ContainerView {
                        host: self.current_node.clone(),
                        profile,
                        guarantee_pages: sample.ubc.guarantee_pages().finite().unwrap_or(0),
                        oom_usage_pages: sample.ubc.oom_usage_pages(),
                        oom_barrier_pages: oom_barrier,
                        resident_pages: sample.ubc.get(ParamId::Physpages).held,
                        replica_group: self.monitor.replica_groups.get(container_id).cloned(),
                    },
                );
            }
        }
        let mut collector = Collector {
            monitor: self,
            view: &mut view,
            current_node: String::new(),
        };
        self.hierarchy.visit(&mut collector);
        view
    }

    fn outcome_to_request(&mut self, source: &str, outcome: ResolverOutcome) -> Option<ActionRequest> {
        match outcome {
            ResolverOutcome::RaisedLimits { container, profile } => Some(ActionRequest {
                request_id: self.allocate_request_id(),
                kind: ActionKind::AdjustUbc,
                container_id: container,
                source: source.to_string(),
                target: None,
                payload: Some(profile),
            }),
            ResolverOutcome::MigrationRequested {
                container,
                target,
                raise_after,
            } => {
                let request_id = self.allocate_request_id();
                if let Some(profile) = raise_after {
                    self.pending_raises
                        .insert(request_id, (container.clone(), profile));
                }
                Some(ActionRequest {
                    request_id,
                    kind: ActionKind::Migrate,
                    container_id: container,
                    source: source.to_string(),
                    target: Some(target),
                    payload: None,
                })
            }
            ResolverOutcome::ReplicationRequested { container, target } => {
                let image = format!("{}.img", container);
                Some(ActionRequest {
                    request_id: self.allocate_request_id(),
                    kind: ActionKind::Replicate,
                    container_id: container,
                    source: source.to_string(),
                    target: Some(target),
                    payload: Some(image),
                })
            }
            ResolverOutcome::Unresolved => None,
        }
    }

    /// Evaluate every container and node against the active policies and
    /// convert resolver outcomes into actions. Adjustments are returned
    /// for immediate execution; transfers are also submitted to the
    /// actlater queue. Entities that already have a transfer pending are
    /// left alone until it completes.
    pub fn run_stress_check(&mut self) -> Vec<ActionRequest> {
        let view = self.cluster_view();
        let pending = self.actlater.pending_containers();
        let resources = self.policies.active_resources();
        let mut issued = Vec::new();

        type Entity = (NodeId, Option<ContainerId>);
        let mut stressed: Vec<(Entity, String)> = Vec::new();

        for (node_id, node) in self.hierarchy.nodes() {
            for resource in &resources {
                let Some((policy, state)) = self.policies.active_policy(resource) else {
                    continue;
                };
                if node.samples().is_empty() {
                    continue;
                }
                if let Ok(Verdict::Stressed) = policy.check_node(node_id, node.samples(), &state) {
                    stressed.push(((node_id.clone(), None), resource.clone()));
                }
            }
            for (container_id, container) in node.containers() {
                if pending.contains(container_id) {
                    continue;
                }
                for resource in &resources {
                    let Some((policy, state)) = self.policies.active_policy(resource) else {
                        continue;
                    };
                    if let Ok(Verdict::Stressed) =
                        policy.check_container(container_id, container.samples(), &state)
                    {
                        stressed
                            .push(((node_id.clone(), Some(container_id.clone())), resource.clone()));
                    }
                }
            }
        }

        for ((node_id, container_id), resource) in stressed {
            let mut outcome = ResolverOutcome::Unresolved;
            for registration in self.resolvers.resolvers_for(&resource) {
                let state = self.policies.policy_state(&resource, &registration.id);
                outcome = match &container_id {
                    Some(container) => {
                        registration.resolver.resolve_container(container, &view, &state)
                    }
                    None => registration.resolver.resolve_node(&node_id, &view, &state),
                };
                if outcome != ResolverOutcome::Unresolved {
                    break;
                }
            }
            // Node-level resolution may pick a container that already has
            // a queued transfer; drop such duplicates.
            if let ResolverOutcome::MigrationRequested { container, .. }
            | ResolverOutcome::ReplicationRequested { container, .. } = &outcome
            {
                if pending.contains(container) {
                    continue;
                }
            }
            if let Some(request) = self.outcome_to_request(&node_id, outcome) {
                if request.kind != ActionKind::AdjustUbc {
                    self.actlater.submit(request.clone());
                }
                issued.push(request);
            }
        }
        issued
    }

    /// Confirm that an adjustment was applied, moving the container onto
    /// its new rung.
    pub fn confirm_adjust(&mut self, container_id: &str, profile: &str) {
        self.set_container_profile(container_id, profile);
    }

    /// Terminal outcome for a transfer. A successful migration that was
    /// requested to make a limit raise possible yields the follow-up
    /// adjustment request.
    pub fn on_transfer_result(
        &mut self,
        request_id: RequestId,
        outcome: Result<(), String>,
    ) -> Vec<ActionRequest> {
        let success = outcome.is_ok();
        self.actlater.complete(request_id, outcome);
        let mut follow_ups = Vec::new();
        if let Some((container, profile)) = self.pending_raises.remove(&request_id) {
            if success {
                let request_id = self.allocate_request_id();
                follow_ups.push(ActionRequest {
                    request_id,
                    kind: ActionKind::AdjustUbc,
                    container_id: container,
                    source: String::new(),
                    target: None,
                    payload: Some(profile),
                });
            }
        }
        follow_ups
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{OverloadResolver, PolicyState};
    use crate::ubc::{mib_to_pages, MemoryProfile, UbcTable};
    use std::cell::Cell;
    use std::rc::Rc;

    fn sample(ts: u64, table: &UbcTable) -> ContainerSample {
        ContainerSample {
            timestamp_ms: ts,
            ubc: table.clone(),
        }
    }

    fn node_sample(ts: u64) -> NodeSample {
        NodeSample {
            timestamp_ms: ts,
            ram_pages: mib_to_pages(2048),
            swap_pages: mib_to_pages(2048),
            resident_pages: 100,
            swap_used_pages: 0,
            cpu_used: 0.1,
        }
    }

    fn observation(ts: u64, node: &str, containers: &[(&str, &UbcTable)]) -> LoadObservation {
        LoadObservation {
            timestamp_ms: ts,
            node_id: node.to_string(),
            node: node_sample(ts),
            containers: containers
                .iter()
                .map(|(id, t)| (id.to_string(), sample(ts, t)))
                .collect(),
        }
    }

    #[test]
    fn ring_is_bounded_and_drops_oldest() {
        let mut hier = NodeHierarchy::new(20);
        hier.register_node("n1", 100, 100);
        let table = UbcTable::new();
        for ts in 1..=21 {
            hier.record_observation(&observation(ts, "n1", &[("ct", &table)]))
                .unwrap();
        }
        let node = hier.node("n1").unwrap();
        assert_eq!(node.samples().len(), 20);
        assert_eq!(node.samples()[0].timestamp_ms, 2);
        let ct = node.containers().get("ct").unwrap();
        assert_eq!(ct.samples().len(), 20);
        assert_eq!(ct.samples()[0].timestamp_ms, 2);
    }

    #[test]
    fn unknown_node_is_rejected() {
        let mut hier = NodeHierarchy::new(20);
        let err = hier
            .record_observation(&observation(1, "ghost", &[]))
            .unwrap_err();
        assert_eq!(err, ControlError::UnknownNode("ghost".to_string()));
    }

    #[test]
    fn first_observation_makes_ring_of_one() {
        let mut hier = NodeHierarchy::new(20);
        hier.register_node("n1", 100, 100);
        let table = UbcTable::new();
        hier.record_observation(&observation(1, "n1", &[("ct", &table)]))
            .unwrap();
        assert_eq!(hier.node("n1").unwrap().samples().len(), 1);
        assert_eq!(
            hier.node("n1")
                .unwrap()
                .containers()
                .get("ct")
                .unwrap()
                .samples()
                .len(),
            1
        );
    }

    #[test]
    fn container_moves_between_nodes_keeping_its_ring() {
        let mut hier = NodeHierarchy::new(20);
        hier.register_node("n1", 100, 100);
        hier.register_node("n2", 100, 100);
        let table = UbcTable::new();
        hier.record_observation(&observation(1, "n1", &[("ct", &table)]))
            .unwrap();
        hier.record_observation(&observation(2, "n2", &[("ct", &table)]))
            .unwrap();
        assert!(hier.node("n1").unwrap().containers().is_empty());
        let entry = hier.node("n2").unwrap().containers().get("ct").unwrap();
        assert_eq!(entry.samples().len(), 2);
    }

    #[derive(Default)]
    struct CountingVisitor {
        entered: usize,
    }
    impl HierarchyVisitor for CountingVisitor {
        fn enter_datacentre(&mut self) {
            self.entered += 1;
        }
        fn enter_node(&mut self, _: &str, _: &NodeEntry) {
            self.entered += 1;
        }
        fn visit_container(&mut self, _: &str, _: &ContainerEntry) {
            self.entered += 1;
        }
    }

    #[test]
    fn visitor_sees_every_entity_once() {
        let mut hier = NodeHierarchy::new(20);
        let table = UbcTable::new();
        for node in ["n1", "n2"] {
            hier.register_node(node, 100, 100);
            let cts: Vec<(String, UbcTable)> = (0..3)
                .map(|i| (format!("{}-ct{}", node, i), table.clone()))
                .collect();
            let refs: Vec<(&str, &UbcTable)> =
                cts.iter().map(|(id, t)| (id.as_str(), t)).collect();
            hier.record_observation(&observation(1, node, &refs)).unwrap();
        }
        let mut visitor = CountingVisitor::default();
        hier.visit(&mut visitor);
        assert_eq!(visitor.entered, 1 + 2 + 6);
    }

    #[test]
    fn empty_datacentre_visits_root_only() {
        let hier = NodeHierarchy::new(20);
        let mut visitor = CountingVisitor::default();
        hier.visit(&mut visitor);
        assert_eq!(visitor.entered, 1);
    }

    #[test]
    fn max_usage_visitor_agrees_with_linear_scan() {
        #[derive(Default)]
        struct MaxUsage {
            best: Option<(ContainerId, u64)>,
        }
        impl HierarchyVisitor for MaxUsage {
            fn visit_container(&mut self, id: &str, entry: &ContainerEntry) {
                let held = entry
                    .latest()
                    .map_or(0, |s| s.ubc.get(ParamId::Oomguarpages).held);
                if self.best.as_ref().map_or(true, |(_, b)| held > *b) {
                    self.best = Some((id.to_string(), held));
                }
            }
        }

        let mut hier = NodeHierarchy::new(20);
        hier.register_node("n1", 100, 100);
        hier.register_node("n2", 100, 100);
        let mut tables = Vec::new();
        for held in [5u64, 40, 12, 7] {
            let mut t = UbcTable::new();
            t.get_mut(ParamId::Oomguarpages).held = held;
            tables.push(t);
        }
        hier.record_observation(&observation(
            1,
            "n1",
            &[("a", &tables[0]), ("b", &tables[1])],
        ))
        .unwrap();
        hier.record_observation(&observation(
            1,
            "n2",
            &[("c", &tables[2]), ("d", &tables[3])],
        ))
        .unwrap();

        let mut visitor = MaxUsage::default();
        hier.visit(&mut visitor);

        // Linear scan oracle over the same data.
        let mut oracle: Option<(ContainerId, u64)> = None;
        for node in hier.nodes().values() {
            for (id, entry) in node.containers() {
                let held = entry.latest().unwrap().ubc.get(ParamId::Oomguarpages).held;
                if oracle.as_ref().map_or(true, |(_, b)| held > *b) {
                    oracle = Some((id.clone(), held));
                }
            }
        }
        assert_eq!(visitor.best, oracle);
        assert_eq!(visitor.best.unwrap().0, "b");
    }

    fn transfer(id: RequestId, container: &str, source: &str, target: &str) -> ActionRequest {
        ActionRequest {
            request_id: id,
            kind: ActionKind::Migrate,
            container_id: container.to_string(),
            source: source.to_string(),
            target: Some(target.to_string()),
            payload: None,
        }
    }

    #[test]
    fn shared_node_transfers_are_serialized() {
        let mut q = ActLater::new();
        q.submit(transfer(1, "ct1", "a", "b"));
        q.submit(transfer(2, "ct2", "a", "c"));
        let first = q.pump().unwrap();
        assert_eq!(first.request_id, 1);
        assert!(q.pump().is_none());
        q.complete(1, Ok(()));
        let second = q.pump().unwrap();
        assert_eq!(second.request_id, 2);
    }

    #[test]
    fn disjoint_transfers_still_wait_their_turn() {
        let mut q = ActLater::new();
        q.submit(transfer(1, "ct1", "a", "b"));
        q.submit(transfer(2, "ct2", "c", "d"));
        assert_eq!(q.pump().unwrap().request_id, 1);
        // Strict FIFO: c→d touches only free nodes but may not overtake.
        assert!(q.pump().is_none());
        q.complete(1, Ok(()));
        assert_eq!(q.pump().unwrap().request_id, 2);
    }

    #[test]
    fn failure_is_delivered_to_observers() {
        struct Recorder(Rc<Cell<usize>>);
        impl TransferObserver for Recorder {
            fn failed(&mut self, _req: &ActionRequest, reason: &str) {
                assert_eq!(reason, "insufficient memory for checkpoint");
                self.0.set(self.0.get() + 1);
            }
        }
        let failures = Rc::new(Cell::new(0));
        let mut q = ActLater::new();
        q.add_observer(Box::new(Recorder(Rc::clone(&failures))));
        q.submit(transfer(7, "ct1", "a", "b"));
        q.pump().unwrap();
        q.complete(7, Err("insufficient memory for checkpoint".to_string()));
        assert_eq!(failures.get(), 1);
        let notices = q.drain_notices();
        assert!(matches!(notices[0], TransferNotice::Started(_)));
        assert!(matches!(notices[1], TransferNotice::Failed(_, _)));
        assert!(!q.is_node_busy("a"));
        assert!(!q.is_node_busy("b"));
    }

    fn monitor_with_profiles() -> Monitor {
        let tree = ConfigTree::parse_str(crate::config::DEFAULT_CONFIG, "d").unwrap();
        let mut monitor = Monitor::from_config(&tree);
        monitor.set_ladder(vec![
            MemoryProfile::from_mib("64", 60, 64, 64, 66),
            MemoryProfile::from_mib("128", 100, 128, 128, 132),
        ]);
        monitor.register_node("bravo02", mib_to_pages(2048), mib_to_pages(2048));
        monitor
    }

    fn stressed_table() -> UbcTable {
        let mut t = UbcTable::new();
        MemoryProfile::from_mib("64", 60, 64, 64, 66).apply_to(&mut t);
        t.get_mut(ParamId::Oomguarpages).held = mib_to_pages(58);
        t.get_mut(ParamId::Privvmpages).held = mib_to_pages(62);
        t.get_mut(ParamId::Physpages).held = mib_to_pages(58);
        t
    }

    fn calm_table() -> UbcTable {
        let mut t = UbcTable::new();
        MemoryProfile::from_mib("64", 60, 64, 64, 66).apply_to(&mut t);
        t.get_mut(ParamId::Oomguarpages).held = mib_to_pages(10);
        t.get_mut(ParamId::Privvmpages).held = mib_to_pages(12);
        t.get_mut(ParamId::Physpages).held = mib_to_pages(10);
        t
    }

    #[test]
    fn no_stress_no_actions() {
        let mut monitor = monitor_with_profiles();
        monitor.set_container_profile("ct", "64");
        let table = calm_table();
        monitor
            .on_observation(&observation(1000, "bravo02", &[("ct", &table)]))
            .unwrap();
        assert!(monitor.run_stress_check().is_empty());
    }

    #[test]
    fn stressed_container_with_headroom_yields_one_adjust() {
        let mut monitor = monitor_with_profiles();
        monitor.set_container_profile("ct", "64");
        let table = stressed_table();
        monitor
            .on_observation(&observation(1000, "bravo02", &[("ct", &table)]))
            .unwrap();
        let actions = monitor.run_stress_check();
        assert_eq!(actions.len(), 1);
        assert_eq!(actions[0].kind, ActionKind::AdjustUbc);
        assert_eq!(actions[0].payload.as_deref(), Some("128"));
        assert_eq!(actions[0].container_id, "ct");
    }

    #[test]
    fn higher_priority_resolver_wins_and_lower_never_runs() {
        struct Fixed(Rc<Cell<usize>>, ResolverOutcome);
        impl OverloadResolver for Fixed {
            fn resolve_container(
                &self,
                _c: &str,
                _v: &ClusterView,
                _s: &PolicyState,
            ) -> ResolverOutcome {
                self.0.set(self.0.get() + 1);
                self.1.clone()
            }
        }
        let high_calls = Rc::new(Cell::new(0));
        let low_calls = Rc::new(Cell::new(0));

        let mut monitor = monitor_with_profiles();
        monitor.resolvers = ResolverRepository::new();
        monitor.resolvers.register(
            "mem",
            "high",
            10,
            Box::new(Fixed(
                Rc::clone(&high_calls),
                ResolverOutcome::RaisedLimits {
                    container: "ct".to_string(),
                    profile: "128".to_string(),
                },
            )),
        );
        monitor.resolvers.register(
            "mem",
            "low",
            5,
            Box::new(Fixed(Rc::clone(&low_calls), ResolverOutcome::Unresolved)),
        );
        monitor.set_container_profile("ct", "64");
        let table = stressed_table();
        monitor
            .on_observation(&observation(1000, "bravo02", &[("ct", &table)]))
            .unwrap();
        let actions = monitor.run_stress_check();
        assert_eq!(actions.len(), 1);
        assert_eq!(high_calls.get(), 1);
        assert_eq!(low_calls.get(), 0);
    }

    #[test]
    fn stress_check_is_deterministic_for_identical_state() {
        let build = || {
            let mut monitor = monitor_with_profiles();
            monitor.set_container_profile("ct", "64");
            let table = stressed_table();
            monitor
                .on_observation(&observation(1000, "bravo02", &[("ct", &table)]))
                .unwrap();
            monitor
        };
        let a = build().run_stress_check();
        let b = build().run_stress_check();
        assert_eq!(a, b);
    }

    fn filler_profile() -> MemoryProfile {
        let mib = 4096 - 64 - 60;
        MemoryProfile::from_mib("filler", mib, mib, mib, mib + 16)
    }

    fn migration_setup() -> Monitor {
        let mut monitor = monitor_with_profiles();
        monitor.register_node("bravo03", mib_to_pages(2048), mib_to_pages(2048));
        monitor.set_container_profile("ct", "64");
        monitor.set_container_profile("filler", "filler");
        let stressed = stressed_table();
        let mut filler = UbcTable::new();
        filler_profile().apply_to(&mut filler);
        monitor
            .on_observation(&observation(
                1000,
                "bravo02",
                &[("ct", &stressed), ("filler", &filler)],
            ))
            .unwrap();
        monitor
            .on_observation(&observation(1000, "bravo03", &[]))
            .unwrap();
        monitor
    }

    #[test]
    fn successful_migration_triggers_pending_raise() {
        let mut monitor = migration_setup();
        let actions = monitor.run_stress_check();
        assert_eq!(actions.len(), 1);
        assert_eq!(actions[0].kind, ActionKind::Migrate);
        assert_eq!(actions[0].target.as_deref(), Some("bravo03"));
        let request_id = actions[0].request_id;

        let dispatched = monitor.actlater.pump().unwrap();
        assert_eq!(dispatched.request_id, request_id);

        let follow_ups = monitor.on_transfer_result(request_id, Ok(()));
        assert_eq!(follow_ups.len(), 1);
        assert_eq!(follow_ups[0].kind, ActionKind::AdjustUbc);
        assert_eq!(follow_ups[0].payload.as_deref(), Some("128"));
    }

    #[test]
    fn failed_migration_withholds_the_raise() {
        let mut monitor = migration_setup();
        let actions = monitor.run_stress_check();
        let request_id = actions[0].request_id;
        monitor.actlater.pump().unwrap();
        let follow_ups =
            monitor.on_transfer_result(request_id, Err("insufficient memory for checkpoint".into()));
        assert!(follow_ups.is_empty());
    }

    #[test]
    fn pending_transfer_suppresses_duplicate_requests() {
        let mut monitor = migration_setup();
        let first = monitor.run_stress_check();
        assert_eq!(first.len(), 1);
        // Same stress seen again while the migration is still queued.
        let second = monitor.run_stress_check();
        assert!(second.is_empty());
    }
}
