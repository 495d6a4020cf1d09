//! The deterministic event loop: drives the workload threads against the
//! prefork servers, samples the agents, runs the manager's stress checks,
//! and executes the resulting actions, in in-process or networked mode.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use crate::config::{ConfigDb, ConfigTree, ConfigValue, MapValue, DEFAULT_CONFIG};
use crate::control::{ActionKind, ActionRequest, Monitor, RequestId};
use crate::policy::{ContainerId, ContainerSample, NodeId, NodeSample};
use crate::scenario::{FaultKind, RunMode, ScenarioSpec};
use crate::ubc::{check_stability, mib_to_pages, ChargeResult, ParamId};
use crate::wire::{AgentEndpoint, AgentPush, ContainerDescriptor, NodeDescriptor, ServerEndpoint};

use super::prefork::{PendingRequest, PreforkState, WorkerBinding};
use super::workload::GaussianTimer;
use super::world::{Container, Node, ProcessRole, ProcessSpec, TouchResult, World};
use super::{Pid, SimError, SimMs};

pub const CHECKPOINT_FAILURE: &str = "insufficient memory for checkpoint";

/// One completed (or refused) request as the load generator saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestOutcome {
    pub issued_ms: SimMs,
    pub completed_ms: SimMs,
    pub ok: bool,
    pub container: ContainerId,
    pub workload: usize,
    pub thread: u32,
}

impl RequestOutcome {
    pub fn response_ms(&self) -> u64 {
        self.completed_ms - self.issued_ms
    }
}

/// Line-delimited event trace record.
#[derive(Debug, Clone)]
pub struct TraceEvent {
    pub time_ms: SimMs,
    pub kind: &'static str,
    pub node: String,
    pub container: String,
    pub detail: String,
}

/// Per-second usage series row for one container.
#[derive(Debug, Clone)]
pub struct SeriesRow {
    pub time_s: u64,
    pub container: ContainerId,
    pub node: NodeId,
    pub privvm_held: u64,
    pub privvm_maxheld: u64,
    pub privvm_failcnt: u64,
    pub oomguar_held: u64,
    pub oomguar_maxheld: u64,
    pub oomguar_failcnt: u64,
    pub resident_pages: u64,
    pub node_resident: u64,
    pub node_swap_used: u64,
    pub node_cpu: f64,
}

/// One manager action with its terminal outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionLogRecord {
    pub issued_ms: SimMs,
    pub kind: ActionKind,
    pub container: ContainerId,
    pub source: NodeId,
    pub target: Option<NodeId>,
    pub payload: Option<String>,
    pub outcome: String,
    pub completed_ms: Option<SimMs>,
}

/// Summary over a run, in the load generator's report shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryReport {
    pub scenario: String,
    pub requests: u64,
    pub avg_ms: f64,
    pub min_ms: u64,
    pub max_ms: u64,
    pub stddev_ms: f64,
    pub err_pct: f64,
    pub throughput_rps: f64,
    pub fail_count: u64,
}

impl SummaryReport {
    fn compute(scenario: &str, outcomes: &[RequestOutcome], fail_count: u64) -> Self {
        if outcomes.is_empty() {
            return SummaryReport {
                scenario: scenario.to_string(),
                requests: 0,
                avg_ms: 0.0,
                min_ms: 0,
                max_ms: 0,
                stddev_ms: 0.0,
                err_pct: 0.0,
                throughput_rps: 0.0,
                fail_count,
            };
        }
        let times: Vec<f64> = outcomes.iter().map(|o| o.response_ms() as f64).collect();
        let n = times.len() as f64;
        let avg = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - avg).powi(2)).sum::<f64>() / n;
        let errors = outcomes.iter().filter(|o| !o.ok).count() as f64;
        let first_issue = outcomes.iter().map(|o| o.issued_ms).min().unwrap();
        let last_completion = outcomes.iter().map(|o| o.completed_ms).max().unwrap();
        let elapsed_s = (last_completion.saturating_sub(first_issue)).max(1) as f64 / 1000.0;
        SummaryReport {
            scenario: scenario.to_string(),
            requests: outcomes.len() as u64,
            avg_ms: avg,
            min_ms: outcomes.iter().map(|o| o.response_ms()).min().unwrap(),
            max_ms: outcomes.iter().map(|o| o.response_ms()).max().unwrap(),
            stddev_ms: var.sqrt(),
            err_pct: 100.0 * errors / n,
            throughput_rps: n / elapsed_s,
            fail_count,
        }
    }
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunArtifacts {
    pub summary: SummaryReport,
    pub outcomes: Vec<RequestOutcome>,
    pub trace: Vec<TraceEvent>,
    pub series: Vec<SeriesRow>,
    pub actions: Vec<ActionLogRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
enum EventKind {
    ThreadStart {
        workload: usize,
        thread: u32,
    },
    IssueRequest {
        workload: usize,
        thread: u32,
    },
    ServiceDone {
        container: ContainerId,
        pid: Pid,
        issued_ms: SimMs,
        ok: bool,
        generation: u64,
    },
    KeepaliveExpire {
        container: ContainerId,
        pid: Pid,
        generation: u64,
    },
    PreforkTick {
        container: ContainerId,
    },
    AgentSample,
    StressCheck,
    TransferComplete {
        request_id: RequestId,
    },
    SeriesSample,
    ConfigUpdate {
        path: String,
        option: String,
        value: ConfigValue,
    },
    InjectFault,
}

struct QueuedEvent {
    at: SimMs,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for QueuedEvent {}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct ThreadRun {
    remaining_loops: u32,
    remaining_in_loop: u32,
    binding: Option<(ContainerId, Pid)>,
    done: bool,
}

fn conn_key(workload: usize, thread: u32) -> u64 {
    ((workload as u64) << 32) | thread as u64
}

fn conn_parts(connection: u64) -> (usize, u32) {
    ((connection >> 32) as usize, (connection & 0xffff_ffff) as u32)
}

enum Manager {
    Off,
    InProcess {
        monitor: Monitor,
        config: ConfigDb,
    },
    Networked {
        server: ServerEndpoint,
        agents: BTreeMap<NodeId, AgentEndpoint>,
    },
}

impl Manager {
    fn enabled(&self) -> bool {
        !matches!(self, Manager::Off)
    }

    fn monitor_mut(&mut self) -> Option<&mut Monitor> {
        match self {
            Manager::Off => None,
            Manager::InProcess { monitor, .. } => Some(monitor),
            Manager::Networked { server, .. } => Some(&mut server.monitor),
        }
    }
}

enum Dispatched {
    Done(Result<(), String>),
    InFlight,
}

struct TransferExec {
    request: ActionRequest,
    checkpoint_pid: Option<Pid>,
    /// Command msg_id awaiting its result, networked mode only.
    command_msg: Option<(NodeId, u64)>,
}

pub struct Engine {
    spec: ScenarioSpec,
    world: World,
    threads: Vec<Vec<ThreadRun>>,
    timers: Vec<GaussianTimer>,
    heap: BinaryHeap<Reverse<QueuedEvent>>,
    seq: u64,
    manager: Manager,
    outcomes: Vec<RequestOutcome>,
    trace: Vec<TraceEvent>,
    series: Vec<SeriesRow>,
    actions: Vec<ActionLogRecord>,
    action_index: BTreeMap<RequestId, usize>,
    warnings: Vec<String>,
    transfers: BTreeMap<RequestId, TransferExec>,
    replica_rr: BTreeMap<String, u64>,
    next_replica: BTreeMap<ContainerId, u32>,
    horizon_ms: SimMs,
}

/// Run a scenario end to end. Deterministic for a fixed seed in
/// in-process mode (and over the loopback transport in networked mode).
pub fn run_scenario(spec: &ScenarioSpec) -> Result<RunArtifacts, SimError> {
    let mut engine = Engine::new(spec.clone())?;
    engine.run()?;
    Ok(engine.into_artifacts())
}

impl Engine {
    pub fn new(spec: ScenarioSpec) -> Result<Self, SimError> {
        let mut warnings = spec.validate().map_err(SimError::Scenario)?;

        let mut world = World::new();
        for node in &spec.nodes {
            world.add_node(Node::new(&node.id, node.ram_pages(), node.swap_pages()));
        }

        let mut engine = Engine {
            threads: spec
                .workloads
                .iter()
                .map(|w| {
                    (0..w.threads)
                        .map(|_| ThreadRun {
                            remaining_loops: w.loop_count,
                            remaining_in_loop: w.requests_per_loop,
                            binding: None,
                            done: w.loop_count == 0 || w.requests_per_loop == 0,
                        })
                        .collect()
                })
                .collect(),
            timers: spec
                .workloads
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let seed = if w.rng_seed != 0 {
                        w.rng_seed
                    } else {
                        spec.seed.wrapping_add(i as u64 + 1)
                    };
                    GaussianTimer::new(seed, w.think_time_mean_ms, w.think_time_stddev_ms)
                })
                .collect(),
            heap: BinaryHeap::new(),
            seq: 0,
            manager: Manager::Off,
            outcomes: Vec::new(),
            trace: Vec::new(),
            series: Vec::new(),
            actions: Vec::new(),
            action_index: BTreeMap::new(),
            warnings: Vec::new(),
            transfers: BTreeMap::new(),
            replica_rr: BTreeMap::new(),
            next_replica: BTreeMap::new(),
            horizon_ms: spec.horizon_s * 1000,
            world,
            spec,
        };

        let container_specs = engine.spec.containers.clone();
        for ct in &container_specs {
            engine.bootstrap_container(&ct.id, &ct.host, &ct.profile, ct.web_server.clone(), ct.replica_group.clone())?;
        }

        for node in engine.spec.nodes.clone() {
            let tables: Vec<&crate::ubc::UbcTable> = engine
                .world
                .containers
                .values()
                .filter(|c| c.host == node.id)
                .map(|c| &c.ubc)
                .collect();
            let report = check_stability(&tables, node.ram_pages(), node.swap_pages());
            if !report.stable {
                warnings.push(format!(
                    "node {} overcommitted: guarantees at {:.2}x of ram+swap",
                    node.id, report.overcommit_factor
                ));
            }
        }
        engine.warnings = warnings;

        engine.setup_manager()?;
        engine.seed_events();
        engine.world.check_invariants()?;
        Ok(engine)
    }

    fn build_manager_config(&self) -> ConfigTree {
        let mut tree = ConfigTree::parse_str(DEFAULT_CONFIG, "<defaults>").expect("defaults parse");
        let m = &self.spec.manager;
        tree.set(
            "server/policy/overload",
            "check_interval",
            ConfigValue::Integer(m.check_interval_s as i64),
        );
        tree.set(
            "client",
            "frequency",
            ConfigValue::Integer(m.sampling_period_s as i64),
        );
        let mut mem = BTreeMap::new();
        mem.insert("threshold".to_string(), MapValue::Decimal(m.mem_threshold));
        tree.set(
            "server/policy/state",
            "overload-mem-default",
            ConfigValue::Map(mem),
        );
        let mut cpu = BTreeMap::new();
        cpu.insert("threshold".to_string(), MapValue::Decimal(m.cpu_threshold));
        tree.set(
            "server/policy/state",
            "overload-cpu-auto_regressive_order_1",
            ConfigValue::Map(cpu),
        );
        tree
    }

    fn setup_manager(&mut self) -> Result<(), SimError> {
        if !self.spec.manager.enabled {
            return Ok(());
        }
        let tree = self.build_manager_config();
        let mut monitor = Monitor::from_config(&tree);
        monitor.set_ladder(self.spec.ladder_profiles());
        monitor.set_replication(
            self.spec.manager.replication_enabled,
            self.spec.manager.replication_threshold,
        );

        match self.spec.mode {
            RunMode::InProcess => {
                for node in &self.spec.nodes {
                    monitor.register_node(&node.id, node.ram_pages(), node.swap_pages());
                }
                for ct in self.world.containers.values() {
                    monitor.set_container_profile(&ct.container_id, &ct.profile_name);
                    if let Some(group) = &ct.replica_group {
                        monitor.set_replica_group(&ct.container_id, group);
                    }
                }
                self.manager = Manager::InProcess {
                    monitor,
                    config: ConfigDb::new(tree),
                };
            }
            RunMode::Networked => {
                let mut server =
                    ServerEndpoint::new(monitor, ConfigDb::new(tree), self.spec.manager.credentials.clone());
                let mut agents = BTreeMap::new();
                let descriptors: Vec<NodeDescriptor> = self
                    .spec
                    .nodes
                    .iter()
                    .map(|node| NodeDescriptor {
                        node_id: node.id.clone(),
                        ram_pages: node.ram_pages(),
                        swap_pages: node.swap_pages(),
                        containers: self
                            .world
                            .containers
                            .values()
                            .filter(|c| c.host == node.id)
                            .map(|c| ContainerDescriptor {
                                container_id: c.container_id.clone(),
                                profile: c.profile_name.clone(),
                                replica_group: c.replica_group.clone(),
                            })
                            .collect(),
                    })
                    .collect();
                for descriptor in descriptors {
                    let node_id = descriptor.node_id.clone();
                    let mut agent =
                        AgentEndpoint::new(descriptor, self.spec.manager.credentials.clone());
                    agent
                        .handshake(&mut server)
                        .map_err(|e| SimError::Scenario(format!("agent handshake: {e}")))?;
                    self.trace(0, "agent_registered", &node_id, "", "");
                    agents.insert(node_id, agent);
                }
                self.manager = Manager::Networked { server, agents };
            }
        }
        Ok(())
    }

    fn seed_events(&mut self) {
        let workloads = self.spec.workloads.clone();
        for (w, workload) in workloads.iter().enumerate() {
            for t in 0..workload.threads {
                let at = workload.start_offset_ms(t);
                self.schedule(at, EventKind::ThreadStart { workload: w, thread: t });
            }
        }
        let web_containers: Vec<ContainerId> = self
            .world
            .containers
            .values()
            .filter(|c| c.web.is_some())
            .map(|c| c.container_id.clone())
            .collect();
        for ct in web_containers {
            self.schedule(1000, EventKind::PreforkTick { container: ct });
        }
        self.schedule(1000, EventKind::SeriesSample);
        if self.manager.enabled() {
            let sampling = self.spec.manager.sampling_period_s * 1000;
            self.schedule(sampling, EventKind::AgentSample);
            let check = self
                .manager
                .monitor_mut()
                .map(|m| m.check_interval_ms())
                .unwrap_or(12_000);
            self.schedule(check, EventKind::StressCheck);
        }
        if self.spec.inject_fault.is_some() {
            self.schedule(5000, EventKind::InjectFault);
        }
    }

    fn schedule(&mut self, at: SimMs, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(QueuedEvent { at, seq, kind }));
    }

    /// Schedule a run-time configuration write, routed through the
    /// manager in whatever mode it runs.
    pub fn schedule_config_update(&mut self, at: SimMs, path: &str, option: &str, value: ConfigValue) {
        self.schedule(
            at,
            EventKind::ConfigUpdate {
                path: path.to_string(),
                option: option.to_string(),
                value,
            },
        );
    }

    fn trace(&mut self, time_ms: SimMs, kind: &'static str, node: &str, container: &str, detail: &str) {
        self.trace.push(TraceEvent {
            time_ms,
            kind,
            node: node.to_string(),
            container: container.to_string(),
            detail: detail.to_string(),
        });
    }

    fn think_ms(&mut self, workload: usize) -> SimMs {
        self.timers[workload].delay_ms()
    }

    fn workload_active(&self) -> bool {
        self.threads
            .iter()
            .flatten()
            .any(|t| !t.done)
    }

    // ---- container bootstrap -------------------------------------------

    fn bootstrap_container(
        &mut self,
        id: &str,
        host: &str,
        profile_name: &str,
        web: Option<super::prefork::PreforkConfig>,
        replica_group: Option<String>,
    ) -> Result<(), SimError> {
        let profile = self
            .spec
            .profile(profile_name)
            .ok_or_else(|| SimError::Scenario(format!("unknown profile {profile_name}")))?
            .clone();
        let mut container = Container::new(id, host);
        profile.apply_to(&mut container.ubc);
        container.profile_name = profile_name.to_string();
        container.replica_group = replica_group;
        self.world.containers.insert(id.to_string(), container);

        let t = self.spec.tunables.clone();
        let base = t.container_base_mib;
        let mut daemons: Vec<(&str, ProcessRole, u64)> = Vec::new();
        if base >= 4 {
            daemons.push(("init", ProcessRole::Init, mib_to_pages(1)));
            daemons.push(("udevd", ProcessRole::Service, mib_to_pages(1)));
            daemons.push(("syslogd", ProcessRole::Service, mib_to_pages(1)));
            daemons.push(("sshd", ProcessRole::Service, mib_to_pages(base - 3)));
        } else {
            daemons.push(("init", ProcessRole::Init, mib_to_pages(base.max(1))));
        }
        daemons.push(("services", ProcessRole::Service, mib_to_pages(t.services_mib)));
        for (name, role, pages) in daemons {
            let pid = self
                .world
                .spawn_process(id, ProcessSpec::new(role, pages).root(), t.kmem_per_process_bytes, false)?
                .ok_or_else(|| {
                    SimError::Scenario(format!("container {id} does not fit its profile ({name})"))
                })?;
            self.must_touch(id, pid, pages)?;
        }

        if let Some(config) = web {
            let parent_pages = t.worker_fresh_private_pages();
            let parent_pid = self
                .world
                .spawn_process(
                    id,
                    ProcessSpec::new(ProcessRole::HttpParent, parent_pages).root(),
                    t.kmem_per_process_bytes,
                    false,
                )?
                .ok_or_else(|| SimError::Scenario(format!("container {id} cannot start its web server")))?;
            self.must_touch(id, parent_pid, parent_pages)?;
            let mut state = PreforkState::new(config.clone(), parent_pid);
            for _ in 0..config.start_servers {
                let mut spec = ProcessSpec::new(ProcessRole::HttpWorker, parent_pages);
                spec.parent = Some(parent_pid);
                let pid = self
                    .world
                    .spawn_process(id, spec, t.kmem_per_process_bytes, false)?
                    .ok_or_else(|| {
                        SimError::Scenario(format!("container {id} cannot pre-fork its workers"))
                    })?;
                self.must_touch(id, pid, parent_pages)?;
                state.add_worker(pid, 0);
            }
            self.world.container_mut(id).web = Some(state);
        }
        Ok(())
    }

    fn must_touch(&mut self, container: &str, pid: Pid, pages: u64) -> Result<(), SimError> {
        match self.world.touch_pages(container, pid, pages)? {
            TouchResult::OomTriggered => Err(SimError::Scenario(format!(
                "node hosting {container} cannot back its boot footprint"
            ))),
            _ => Ok(()),
        }
    }

    // ---- main loop ------------------------------------------------------

    pub fn run(&mut self) -> Result<(), SimError> {
        while let Some(Reverse(event)) = self.heap.pop() {
            if event.at > self.horizon_ms {
                break;
            }
            self.world.now_ms = event.at;
            if let Some(monitor) = self.manager.monitor_mut() {
                let _ = monitor;
            }
            if let Manager::Networked { server, .. } = &mut self.manager {
                server.now_ms = event.at;
            }
            self.handle(event.at, event.kind)?;
            self.world.check_invariants()?;
        }
        Ok(())
    }

    pub fn into_artifacts(self) -> RunArtifacts {
        let fail_count: u64 = self
            .world
            .containers
            .values()
            .map(|c| c.ubc.get(ParamId::Privvmpages).failcnt)
            .sum();
        let summary = SummaryReport::compute(&self.spec.name, &self.outcomes, fail_count);
        RunArtifacts {
            summary,
            outcomes: self.outcomes,
            trace: self.trace,
            series: self.series,
            actions: self.actions,
            warnings: self.warnings,
        }
    }

    fn handle(&mut self, now: SimMs, kind: EventKind) -> Result<(), SimError> {
        match kind {
            EventKind::ThreadStart { workload, thread } => {
                self.trace(now, "thread_start", "", "", &format!("wl={workload} thread={thread}"));
                let think = self.think_ms(workload);
                self.schedule(now + think, EventKind::IssueRequest { workload, thread });
                Ok(())
            }
            EventKind::IssueRequest { workload, thread } => self.issue_request(now, workload, thread),
            EventKind::ServiceDone {
                container,
                pid,
                issued_ms,
                ok,
                generation,
            } => self.service_done(now, &container, pid, issued_ms, ok, generation),
            EventKind::KeepaliveExpire {
                container,
                pid,
                generation,
            } => self.keepalive_expire(now, &container, pid, generation),
            EventKind::PreforkTick { container } => self.prefork_tick(now, &container),
            EventKind::AgentSample => self.agent_sample(now),
            EventKind::StressCheck => self.stress_check(now),
            EventKind::TransferComplete { request_id } => self.transfer_complete(now, request_id),
            EventKind::SeriesSample => {
                self.series_sample(now);
                Ok(())
            }
            EventKind::ConfigUpdate { path, option, value } => {
                self.apply_config_update(now, &path, &option, value)
            }
            EventKind::InjectFault => {
                if let Some(FaultKind::LeakResident) = self.spec.inject_fault {
                    if let Some(node) = self.world.nodes.values_mut().next() {
                        node.resident_used += 64;
                    }
                    self.trace(now, "fault_injected", "", "", "leak-resident");
                }
                Ok(())
            }
        }
    }

    // ---- request path ---------------------------------------------------

    fn route(&mut self, workload: usize) -> ContainerId {
        let target = self.spec.workloads[workload].target.clone();
        let Some(group) = self.world.containers[&target].replica_group.clone() else {
            return target;
        };
        let members: Vec<ContainerId> = self
            .world
            .containers
            .values()
            .filter(|c| c.replica_group.as_deref() == Some(group.as_str()) && c.web.is_some())
            .map(|c| c.container_id.clone())
            .collect();
        if members.is_empty() {
            return target;
        }
        let counter = self.replica_rr.entry(group).or_insert(0);
        let pick = members[(*counter as usize) % members.len()].clone();
        *counter += 1;
        pick
    }

    fn issue_request(&mut self, now: SimMs, workload: usize, thread: u32) -> Result<(), SimError> {
        let binding = self.threads[workload][thread as usize].binding.clone();
        match binding {
            Some((container, pid)) => self.start_service(now, &container, pid, workload, now),
            None => {
                let container = self.route(workload);
                self.acquire_worker(now, &container, workload, thread)
            }
        }
    }

    fn acquire_worker(
        &mut self,
        now: SimMs,
        container: &str,
        workload: usize,
        thread: u32,
    ) -> Result<(), SimError> {
        let host = self.world.host_of(container);
        let (idle, queue_empty, concurrent, max_clients) = {
            let web = self.world.containers[container].web.as_ref().unwrap();
            (
                web.first_idle(),
                web.pending.is_empty(),
                web.concurrent_connections(),
                web.config.max_clients,
            )
        };
        match idle {
            Some(pid) if queue_empty => self.bind_and_serve(now, container, pid, workload, thread, now),
            _ => {
                if concurrent < max_clients {
                    let web = self.world.containers.get_mut(container).unwrap().web.as_mut().unwrap();
                    web.pending.push_back(PendingRequest {
                        connection: conn_key(workload, thread),
                        issued_ms: now,
                    });
                    self.trace(now, "request_queued", &host, container, &format!("wl={workload} thread={thread}"));
                    self.maintain(now, container)?;
                    Ok(())
                } else {
                    self.trace(now, "connection_refused", &host, container, &format!("wl={workload} thread={thread}"));
                    self.outcomes.push(RequestOutcome {
                        issued_ms: now,
                        completed_ms: now,
                        ok: false,
                        container: container.to_string(),
                        workload,
                        thread,
                    });
                    self.thread_continue(now, workload, thread)
                }
            }
        }
    }

    fn bind_and_serve(
        &mut self,
        now: SimMs,
        container: &str,
        pid: Pid,
        workload: usize,
        thread: u32,
        issued_ms: SimMs,
    ) -> Result<(), SimError> {
        let buf = self.spec.tunables.conn_buf_bytes;
        {
            let ct = self.world.containers.get_mut(container).unwrap();
            ct.ubc.charge(ParamId::Tcpsndbuf, buf);
            ct.ubc.charge(ParamId::Tcprcvbuf, buf);
            let web = ct.web.as_mut().unwrap();
            let worker = web.worker_mut(pid);
            worker.binding = WorkerBinding::Bound {
                connection: conn_key(workload, thread),
                busy: false,
            };
            worker.generation += 1;
        }
        self.threads[workload][thread as usize].binding = Some((container.to_string(), pid));
        self.start_service(now, container, pid, workload, issued_ms)
    }

    fn start_service(
        &mut self,
        now: SimMs,
        container: &str,
        pid: Pid,
        workload: usize,
        issued_ms: SimMs,
    ) -> Result<(), SimError> {
        let host = self.world.host_of(container);
        let growth = self.spec.tunables.worker_growth_pages();
        let served_php = {
            let web = self.world.containers[container].web.as_ref().unwrap();
            web.worker(pid).served_php
        };
        // The first dynamic page served by a fresh worker grows its
        // private allocation; a denied growth yields an error page.
        let ok = if !served_php && growth > 0 {
            match self.world.grow_process(container, pid, growth, false) {
                ChargeResult::Granted => {
                    self.touch_retrying(now, container, pid, growth)?;
                    let web = self.world.containers.get_mut(container).unwrap().web.as_mut().unwrap();
                    web.worker_mut(pid).served_php = true;
                    true
                }
                ChargeResult::Denied => {
                    self.trace(now, "growth_denied", &host, container, &format!("pid={pid}"));
                    false
                }
            }
        } else {
            true
        };

        let generation = {
            let web = self.world.containers.get_mut(container).unwrap().web.as_mut().unwrap();
            let worker = web.worker_mut(pid);
            worker.generation += 1;
            if let WorkerBinding::Bound { busy, .. } = &mut worker.binding {
                *busy = true;
            }
            worker.generation
        };
        let duration = if ok {
            self.spec.workloads[workload].base_service_time_ms
        } else {
            self.spec.tunables.error_response_ms
        };
        self.schedule(
            now + duration,
            EventKind::ServiceDone {
                container: container.to_string(),
                pid,
                issued_ms,
                ok,
                generation,
            },
        );
        Ok(())
    }

    fn service_done(
        &mut self,
        now: SimMs,
        container: &str,
        pid: Pid,
        issued_ms: SimMs,
        ok: bool,
        generation: u64,
    ) -> Result<(), SimError> {
        let Some(ct) = self.world.containers.get_mut(container) else {
            return Ok(());
        };
        let Some(web) = ct.web.as_mut() else {
            return Ok(());
        };
        let Some(worker) = web.workers.get_mut(&pid) else {
            // Killed mid-service; the outcome was recorded at kill time.
            return Ok(());
        };
        if worker.generation != generation {
            return Ok(());
        }
        let WorkerBinding::Bound { connection, busy } = &mut worker.binding else {
            return Ok(());
        };
        *busy = false;
        let connection = *connection;
        let (workload, thread) = conn_parts(connection);
        let keepalive = web.config.keepalive_enabled;
        let timeout = web.config.keepalive_timeout_ms;

        self.outcomes.push(RequestOutcome {
            issued_ms,
            completed_ms: now,
            ok,
            container: container.to_string(),
            workload,
            thread,
        });
        let host = self.world.host_of(container);
        self.trace(
            now,
            "request_completed",
            &host,
            container,
            &format!("wl={workload} thread={thread} ms={} ok={ok}", now - issued_ms),
        );

        if keepalive {
            self.schedule(
                now + timeout,
                EventKind::KeepaliveExpire {
                    container: container.to_string(),
                    pid,
                    generation,
                },
            );
        } else {
            self.unbind(now, container, pid)?;
        }
        self.thread_continue(now, workload, thread)?;
        self.maintain(now, container)
    }

    fn thread_continue(&mut self, now: SimMs, workload: usize, thread: u32) -> Result<(), SimError> {
        let spec_requests = self.spec.workloads[workload].requests_per_loop;
        let th = &mut self.threads[workload][thread as usize];
        if th.done {
            return Ok(());
        }
        th.remaining_in_loop -= 1;
        if th.remaining_in_loop == 0 {
            th.remaining_loops -= 1;
            if th.remaining_loops == 0 {
                th.done = true;
                let binding = th.binding.take();
                if let Some((container, pid)) = binding {
                    self.trace(now, "connection_closed", "", &container, &format!("pid={pid}"));
                    self.unbind(now, &container, pid)?;
                }
                return Ok(());
            }
            th.remaining_in_loop = spec_requests;
        }
        let think = self.think_ms(workload);
        self.schedule(now + think, EventKind::IssueRequest { workload, thread });
        Ok(())
    }

    /// Release a worker back to the idle pool and hand it to the longest
    /// waiting connection, if any.
    fn unbind(&mut self, now: SimMs, container: &str, pid: Pid) -> Result<(), SimError> {
        let buf = self.spec.tunables.conn_buf_bytes;
        let connection = {
            let ct = self.world.containers.get_mut(container).unwrap();
            let web = ct.web.as_mut().unwrap();
            let worker = web.worker_mut(pid);
            let WorkerBinding::Bound { connection, .. } = worker.binding else {
                return Ok(());
            };
            worker.binding = WorkerBinding::Idle;
            worker.idle_since = now;
            worker.generation += 1;
            ct.ubc.uncharge(ParamId::Tcpsndbuf, buf)?;
            ct.ubc.uncharge(ParamId::Tcprcvbuf, buf)?;
            connection
        };
        let (workload, thread) = conn_parts(connection);
        if let Some(th) = self
            .threads
            .get_mut(workload)
            .and_then(|v| v.get_mut(thread as usize))
        {
            if th.binding.as_ref().is_some_and(|(_, p)| *p == pid) {
                th.binding = None;
            }
        }
        self.serve_pending(now, container)
    }

    fn serve_pending(&mut self, now: SimMs, container: &str) -> Result<(), SimError> {
        loop {
            let next = {
                let web = self.world.containers[container].web.as_ref().unwrap();
                match (web.pending.front(), web.first_idle()) {
                    (Some(front), Some(pid)) => Some((front.connection, front.issued_ms, pid)),
                    _ => None,
                }
            };
            let Some((connection, issued_ms, pid)) = next else {
                return Ok(());
            };
            self.world
                .containers
                .get_mut(container)
                .unwrap()
                .web
                .as_mut()
                .unwrap()
                .pending
                .pop_front();
            let (workload, thread) = conn_parts(connection);
            self.bind_and_serve(now, container, pid, workload, thread, issued_ms)?;
        }
    }

    fn keepalive_expire(
        &mut self,
        now: SimMs,
        container: &str,
        pid: Pid,
        generation: u64,
    ) -> Result<(), SimError> {
        let expired = {
            let Some(ct) = self.world.containers.get(container) else {
                return Ok(());
            };
            let Some(web) = ct.web.as_ref() else {
                return Ok(());
            };
            match web.workers.get(&pid) {
                Some(worker) => {
                    worker.generation == generation
                        && matches!(worker.binding, WorkerBinding::Bound { busy: false, .. })
                }
                None => false,
            }
        };
        if expired {
            let host = self.world.host_of(container);
            self.trace(now, "keepalive_expired", &host, container, &format!("pid={pid}"));
            self.unbind(now, container, pid)?;
            self.maintain(now, container)?;
        }
        Ok(())
    }

    // ---- prefork maintenance ---------------------------------------------

    /// Spawn-side pool maintenance: create one worker when the idle pool
    /// is short, at most one attempt per simulated second. Denied forks
    /// fail silently apart from the beancounter fail count.
    fn maintain(&mut self, now: SimMs, container: &str) -> Result<(), SimError> {
        if self.world.containers.get(container).and_then(|c| c.web.as_ref()).is_none() {
            return Ok(());
        }
        let t = self.spec.tunables.clone();
        let (short, allowed, parent) = {
            let web = self.world.containers[container].web.as_ref().unwrap();
            (
                web.idle_count() < web.config.min_spare,
                web.spawn_allowed(now),
                web.parent_pid,
            )
        };
        if !short || !allowed {
            return Ok(());
        }
        {
            let web = self.world.containers.get_mut(container).unwrap().web.as_mut().unwrap();
            web.last_spawn_ms = Some(now);
        }
        let pages = t.worker_fresh_private_pages();
        let mut spec = ProcessSpec::new(ProcessRole::HttpWorker, pages);
        spec.parent = Some(parent);
        let host = self.world.host_of(container);
        match self.world.spawn_process(container, spec, t.kmem_per_process_bytes, false)? {
            Some(pid) => {
                self.touch_retrying(now, container, pid, pages)?;
                let web = self.world.containers.get_mut(container).unwrap().web.as_mut().unwrap();
                web.add_worker(pid, now);
                self.trace(now, "worker_spawned", &host, container, &format!("pid={pid}"));
                self.serve_pending(now, container)?;
            }
            None => {
                self.trace(now, "spawn_denied", &host, container, "");
            }
        }
        Ok(())
    }

    fn prefork_tick(&mut self, now: SimMs, container: &str) -> Result<(), SimError> {
        if self.world.containers.get(container).and_then(|c| c.web.as_ref()).is_none() {
            return Ok(());
        }
        self.maintain(now, container)?;
        let (excess_idle, victim) = {
            let web = self.world.containers[container].web.as_ref().unwrap();
            (web.idle_count() > web.config.max_spare, web.longest_idle())
        };
        if excess_idle {
            if let Some(pid) = victim {
                let host = self.world.host_of(container);
                {
                    let web = self.world.containers.get_mut(container).unwrap().web.as_mut().unwrap();
                    web.workers.remove(&pid);
                }
                self.world
                    .exit_process(container, pid, self.spec.tunables.kmem_per_process_bytes)?;
                self.trace(now, "worker_killed", &host, container, &format!("pid={pid}"));
            }
        }
        let keep_ticking = self.workload_active() || {
            let web = self.world.containers[container].web.as_ref().unwrap();
            web.idle_count() > web.config.max_spare
        };
        if keep_ticking && now + 1000 <= self.horizon_ms {
            self.schedule(now + 1000, EventKind::PreforkTick { container: container.to_string() });
        }
        Ok(())
    }

    /// Touch pages, running the out-of-memory killer until they fit.
    fn touch_retrying(&mut self, now: SimMs, container: &str, pid: Pid, pages: u64) -> Result<(), SimError> {
        loop {
            match self.world.touch_pages(container, pid, pages)? {
                TouchResult::OomTriggered => {
                    let host = self.world.host_of(container);
                    let victim = self
                        .world
                        .oom_kill(&host, self.spec.tunables.kmem_per_process_bytes)?;
                    self.trace(now, "oom_kill", &host, "", &format!("pid={victim}"));
                    self.worker_killed_cleanup(now, victim)?;
                }
                _ => return Ok(()),
            }
        }
    }

    /// If an out-of-memory victim was a web worker, drop its pool record
    /// and fail any request it was serving.
    fn worker_killed_cleanup(&mut self, now: SimMs, victim: Pid) -> Result<(), SimError> {
        let found = self.world.containers.iter().find_map(|(id, ct)| {
            ct.web
                .as_ref()
                .and_then(|web| web.workers.get(&victim))
                .map(|w| (id.clone(), w.binding))
        });
        let Some((container, binding)) = found else {
            return Ok(());
        };
        {
            let web = self.world.containers.get_mut(&container).unwrap().web.as_mut().unwrap();
            web.workers.remove(&victim);
        }
        if let WorkerBinding::Bound { connection, busy } = binding {
            let buf = self.spec.tunables.conn_buf_bytes;
            let ct = self.world.containers.get_mut(&container).unwrap();
            ct.ubc.uncharge(ParamId::Tcpsndbuf, buf)?;
            ct.ubc.uncharge(ParamId::Tcprcvbuf, buf)?;
            let (workload, thread) = conn_parts(connection);
            if let Some(th) = self
                .threads
                .get_mut(workload)
                .and_then(|v| v.get_mut(thread as usize))
            {
                th.binding = None;
            }
            if busy {
                self.outcomes.push(RequestOutcome {
                    issued_ms: now,
                    completed_ms: now,
                    ok: false,
                    container: container.clone(),
                    workload,
                    thread,
                });
                self.thread_continue(now, workload, thread)?;
            }
        }
        Ok(())
    }

    // ---- manager integration ---------------------------------------------

    fn update_cpu(&mut self, node_id: &str) {
        let share = self.spec.tunables.cpu_share_per_busy_worker;
        let busy: u32 = self
            .world
            .containers
            .values()
            .filter(|c| c.host == node_id)
            .filter_map(|c| c.web.as_ref())
            .map(|w| w.busy_count())
            .sum();
        let node = self.world.nodes.get_mut(node_id).unwrap();
        node.cpu_used = (busy as f64 * share).min(node.cpu_capacity);
    }

    fn build_observation(&self, node_id: &str, now: SimMs) -> crate::control::LoadObservation {
        let node = &self.world.nodes[node_id];
        let containers = self
            .world
            .containers
            .values()
            .filter(|c| c.host == node_id)
            .map(|c| {
                (
                    c.container_id.clone(),
                    ContainerSample {
                        timestamp_ms: now,
                        ubc: c.ubc.clone(),
                    },
                )
            })
            .collect();
        crate::control::LoadObservation {
            timestamp_ms: now,
            node_id: node_id.to_string(),
            node: NodeSample {
                timestamp_ms: now,
                ram_pages: node.ram_pages,
                swap_pages: node.swap_pages,
                resident_pages: node.resident_used,
                swap_used_pages: node.swap_used,
                cpu_used: node.cpu_used,
            },
            containers,
        }
    }

    fn agent_sample(&mut self, now: SimMs) -> Result<(), SimError> {
        if !self.manager.enabled() {
            return Ok(());
        }
        let node_ids: Vec<NodeId> = self.world.nodes.keys().cloned().collect();
        for node_id in &node_ids {
            self.update_cpu(node_id);
        }
        let observations: Vec<crate::control::LoadObservation> = node_ids
            .iter()
            .map(|n| self.build_observation(n, now))
            .collect();
        match &mut self.manager {
            Manager::Off => {}
            Manager::InProcess { monitor, .. } => {
                for obs in observations {
                    monitor
                        .on_observation(&obs)
                        .map_err(|e| SimError::Scenario(e.to_string()))?;
                }
            }
            Manager::Networked { server, agents } => {
                for obs in observations {
                    let agent = agents.get_mut(&obs.node_id).unwrap();
                    agent
                        .report_load(server, obs)
                        .map_err(|e| SimError::Scenario(format!("report_load: {e}")))?;
                }
            }
        }
        self.trace(now, "sample", "", "", "");
        if self.workload_active() {
            let period = self.spec.manager.sampling_period_s * 1000;
            self.schedule(now + period, EventKind::AgentSample);
        }
        Ok(())
    }

    fn stress_check(&mut self, now: SimMs) -> Result<(), SimError> {
        let Some(monitor) = self.manager.monitor_mut() else {
            return Ok(());
        };
        let actions = monitor.run_stress_check();
        let interval = monitor.check_interval_ms();
        self.trace(now, "stress_check", "", "", &format!("actions={}", actions.len()));
        for action in &actions {
            self.log_action(now, action);
        }
        for action in actions {
            if action.kind == ActionKind::AdjustUbc {
                let result = self.dispatch_command(now, &action)?;
                if let Dispatched::Done(result) = result {
                    self.finish_adjust(now, &action, result);
                }
            }
        }
        self.pump_transfers(now)?;
        if self.workload_active() {
            self.schedule(now + interval, EventKind::StressCheck);
        }
        Ok(())
    }

    fn log_action(&mut self, now: SimMs, action: &ActionRequest) {
        let record = ActionLogRecord {
            issued_ms: now,
            kind: action.kind,
            container: action.container_id.clone(),
            source: action.source.clone(),
            target: action.target.clone(),
            payload: action.payload.clone(),
            outcome: "issued".to_string(),
            completed_ms: None,
        };
        self.action_index.insert(action.request_id, self.actions.len());
        self.actions.push(record);
    }

    fn set_action_outcome(&mut self, request_id: RequestId, now: SimMs, outcome: &str) {
        if let Some(&idx) = self.action_index.get(&request_id) {
            self.actions[idx].outcome = outcome.to_string();
            self.actions[idx].completed_ms = Some(now);
        }
    }

    /// Route one command to the node that must execute it. In networked
    /// mode the command and its result travel as encoded frames through
    /// the loopback transport.
    fn dispatch_command(&mut self, now: SimMs, action: &ActionRequest) -> Result<Dispatched, SimError> {
        match &mut self.manager {
            Manager::Off => unreachable!("commands only exist with the manager on"),
            Manager::InProcess { .. } => self.execute_command(now, action.clone(), None),
            Manager::Networked { server, agents } => {
                server
                    .send_command(action)
                    .map_err(|e| SimError::Scenario(format!("send_command: {e}")))?;
                let exec_node = match action.kind {
                    ActionKind::Replicate => action.target.clone().unwrap(),
                    _ => action.source.clone(),
                };
                let agent = agents.get_mut(&exec_node).unwrap();
                let frames = server.take_outbox(agent.conn_id);
                let pushes = agent
                    .decode_pushes(frames)
                    .map_err(|e| SimError::Scenario(format!("decode_pushes: {e}")))?;
                let mut decoded = None;
                for push in pushes {
                    if let AgentPush::Command { msg_id, action } = push {
                        decoded = Some((msg_id, action));
                    }
                }
                let (msg_id, decoded_action) = decoded
                    .ok_or_else(|| SimError::Scenario("command frame lost in transit".to_string()))?;
                debug_assert_eq!(decoded_action, *action);
                let dispatched =
                    self.execute_command(now, decoded_action, Some((exec_node.clone(), msg_id)))?;
                if let Dispatched::Done(result) = &dispatched {
                    let Manager::Networked { server, agents } = &mut self.manager else {
                        unreachable!()
                    };
                    let agent = agents.get_mut(&exec_node).unwrap();
                    agent.send_command_result(server, msg_id, action.request_id, result);
                    // The protocol result is authoritative on this path.
                    let results = server.take_command_results();
                    debug_assert_eq!(results.len(), 1);
                    return Ok(Dispatched::Done(results.into_iter().next().unwrap().1));
                }
                Ok(dispatched)
            }
        }
    }

    /// Perform a command against the cluster, as the receiving agent
    /// would. Transfers that pass their preconditions stay in flight
    /// until the scheduled completion.
    fn execute_command(
        &mut self,
        now: SimMs,
        action: ActionRequest,
        command_msg: Option<(NodeId, u64)>,
    ) -> Result<Dispatched, SimError> {
        match action.kind {
            ActionKind::AdjustUbc => {
                let profile_name = action.payload.clone().unwrap_or_default();
                let Some(profile) = self.spec.profile(&profile_name).cloned() else {
                    return Ok(Dispatched::Done(Err(format!("unknown profile {profile_name}"))));
                };
                let Some(container) = self.world.containers.get_mut(&action.container_id) else {
                    return Ok(Dispatched::Done(Err(format!(
                        "unknown container {}",
                        action.container_id
                    ))));
                };
                profile.apply_to(&mut container.ubc);
                container.profile_name = profile_name.clone();
                let host = container.host.clone();
                self.trace(now, "adjust_applied", &host, &action.container_id, &profile_name);
                Ok(Dispatched::Done(Ok(())))
            }
            ActionKind::Migrate => {
                let Some(target) = action.target.clone() else {
                    return Ok(Dispatched::Done(Err("migrate without target".to_string())));
                };
                if !self.world.containers.contains_key(&action.container_id) {
                    return Ok(Dispatched::Done(Err(format!(
                        "unknown container {}",
                        action.container_id
                    ))));
                }
                let source = self.world.host_of(&action.container_id);
                if self.world.nodes[&source].busy_with_transfer
                    || self.world.nodes[&target].busy_with_transfer
                {
                    return Ok(Dispatched::Done(Err(format!(
                        "node busy: {source} or {target}"
                    ))));
                }
                // A live migration starts a checkpoint process inside the
                // container; it counts against the container's own
                // allocation and makes the migration fail when the
                // container cannot accommodate it.
                let checkpoint_pages = self.spec.tunables.checkpoint_pages;
                let spec = ProcessSpec::new(ProcessRole::Checkpoint, checkpoint_pages);
                let pid = match self.world.spawn_process(
                    &action.container_id,
                    spec,
                    self.spec.tunables.kmem_per_process_bytes,
                    false,
                )? {
                    Some(pid) => pid,
                    None => {
                        self.trace(now, "migration_failed", &source, &action.container_id, CHECKPOINT_FAILURE);
                        return Ok(Dispatched::Done(Err(CHECKPOINT_FAILURE.to_string())));
                    }
                };
                self.touch_retrying(now, &action.container_id, pid, checkpoint_pages)?;

                let resident: u64 = self.world.containers[&action.container_id]
                    .processes
                    .values()
                    .map(|p| p.touched_pages())
                    .sum();
                let rate = self.spec.tunables.transfer_rate_pages_per_s.max(1);
                let duration = (resident * 1000).div_ceil(rate);
                self.world.nodes.get_mut(&source).unwrap().busy_with_transfer = true;
                self.world.nodes.get_mut(&target).unwrap().busy_with_transfer = true;
                self.trace(
                    now,
                    "migration_started",
                    &source,
                    &action.container_id,
                    &format!("target={target} pages={resident}"),
                );
                self.transfers.insert(
                    action.request_id,
                    TransferExec {
                        request: action.clone(),
                        checkpoint_pid: Some(pid),
                        command_msg,
                    },
                );
                self.schedule(
                    now + duration,
                    EventKind::TransferComplete {
                        request_id: action.request_id,
                    },
                );
                Ok(Dispatched::InFlight)
            }
            ActionKind::Replicate => {
                let Some(target) = action.target.clone() else {
                    return Ok(Dispatched::Done(Err("replicate without target".to_string())));
                };
                if !self.world.containers.contains_key(&action.container_id) {
                    return Ok(Dispatched::Done(Err(format!(
                        "unknown container {}",
                        action.container_id
                    ))));
                }
                if self.world.nodes[&target].busy_with_transfer {
                    return Ok(Dispatched::Done(Err(format!("node busy: {target}"))));
                }
                let t = &self.spec.tunables;
                let image_pages = mib_to_pages(t.container_base_mib + t.services_mib);
                let rate = t.transfer_rate_pages_per_s.max(1);
                let duration = (image_pages * 1000).div_ceil(rate);
                self.world.nodes.get_mut(&target).unwrap().busy_with_transfer = true;
                self.trace(
                    now,
                    "replication_started",
                    &target,
                    &action.container_id,
                    &format!("image={}", action.payload.clone().unwrap_or_default()),
                );
                self.transfers.insert(
                    action.request_id,
                    TransferExec {
                        request: action.clone(),
                        checkpoint_pid: None,
                        command_msg,
                    },
                );
                self.schedule(
                    now + duration,
                    EventKind::TransferComplete {
                        request_id: action.request_id,
                    },
                );
                Ok(Dispatched::InFlight)
            }
        }
    }

    /// Dispatch queued transfers while the front of the queue is
    /// eligible. Immediate failures resolve on the spot and let the next
    /// request through.
    fn pump_transfers(&mut self, now: SimMs) -> Result<(), SimError> {
        loop {
            let Some(monitor) = self.manager.monitor_mut() else {
                return Ok(());
            };
            let Some(request) = monitor.actlater.pump() else {
                return Ok(());
            };
            match self.dispatch_command(now, &request)? {
                Dispatched::InFlight => return Ok(()),
                Dispatched::Done(result) => {
                    self.resolve_transfer(now, request.request_id, result)?;
                }
            }
        }
    }

    fn finish_adjust(&mut self, now: SimMs, action: &ActionRequest, result: Result<(), String>) {
        match result {
            Ok(()) => {
                if let Some(monitor) = self.manager.monitor_mut() {
                    monitor.confirm_adjust(
                        &action.container_id,
                        action.payload.as_deref().unwrap_or_default(),
                    );
                }
                self.set_action_outcome(action.request_id, now, "applied");
            }
            Err(reason) => {
                self.set_action_outcome(action.request_id, now, &format!("failed: {reason}"));
            }
        }
    }

    /// Feed a transfer's terminal result to the monitor, execute any
    /// follow-up adjustments, and let the queue move on.
    fn resolve_transfer(
        &mut self,
        now: SimMs,
        request_id: RequestId,
        result: Result<(), String>,
    ) -> Result<(), SimError> {
        match &result {
            Ok(()) => self.set_action_outcome(request_id, now, "succeeded"),
            Err(reason) => self.set_action_outcome(request_id, now, &format!("failed: {reason}")),
        }
        let follow_ups = {
            let monitor = self.manager.monitor_mut().unwrap();
            monitor.on_transfer_result(request_id, result)
        };
        for mut follow_up in follow_ups {
            if follow_up.source.is_empty() {
                follow_up.source = self.world.host_of(&follow_up.container_id);
            }
            self.log_action(now, &follow_up);
            let outcome = self.dispatch_command(now, &follow_up)?;
            if let Dispatched::Done(result) = outcome {
                self.finish_adjust(now, &follow_up, result);
            }
        }
        self.pump_transfers(now)
    }

    fn transfer_complete(&mut self, now: SimMs, request_id: RequestId) -> Result<(), SimError> {
        let Some(exec) = self.transfers.remove(&request_id) else {
            return Ok(());
        };
        let action = exec.request.clone();
        match action.kind {
            ActionKind::Migrate => {
                let source = self.world.host_of(&action.container_id);
                let target = action.target.clone().unwrap();
                self.world.rehost_container(&action.container_id, &target);
                if let Some(pid) = exec.checkpoint_pid {
                    self.world.exit_process(
                        &action.container_id,
                        pid,
                        self.spec.tunables.kmem_per_process_bytes,
                    )?;
                }
                self.world.nodes.get_mut(&source).unwrap().busy_with_transfer = false;
                self.world.nodes.get_mut(&target).unwrap().busy_with_transfer = false;
                self.trace(now, "migration_completed", &target, &action.container_id, "");
            }
            ActionKind::Replicate => {
                let target = action.target.clone().unwrap();
                let source_profile = self.world.containers[&action.container_id].profile_name.clone();
                let group = self.world.containers[&action.container_id]
                    .replica_group
                    .clone()
                    .unwrap_or_else(|| action.container_id.clone());
                self.world
                    .containers
                    .get_mut(&action.container_id)
                    .unwrap()
                    .replica_group = Some(group.clone());
                let n = self.next_replica.entry(action.container_id.clone()).or_insert(1);
                let replica_id = format!("{}-r{}", action.container_id, n);
                *n += 1;
                let web_config = self
                    .world
                    .containers[&action.container_id]
                    .web
                    .as_ref()
                    .map(|w| w.config.clone());
                self.bootstrap_container(
                    &replica_id,
                    &target,
                    &source_profile,
                    web_config,
                    Some(group.clone()),
                )?;
                self.schedule(now + 1000, EventKind::PreforkTick { container: replica_id.clone() });
                self.world.nodes.get_mut(&target).unwrap().busy_with_transfer = false;
                if let Some(monitor) = self.manager.monitor_mut() {
                    monitor.set_container_profile(&replica_id, &source_profile);
                    monitor.set_replica_group(&replica_id, &group);
                    monitor.set_replica_group(&action.container_id, &group);
                }
                self.trace(now, "replication_completed", &target, &replica_id, "");
            }
            ActionKind::AdjustUbc => unreachable!("adjustments are immediate"),
        }

        // Deliver the protocol result in networked mode; resolve the
        // queue either way.
        if let Some((node, msg_id)) = exec.command_msg {
            let Manager::Networked { server, agents } = &mut self.manager else {
                unreachable!()
            };
            let agent = agents.get_mut(&node).unwrap();
            agent.send_command_result(server, msg_id, request_id, &Ok(()));
            let results = server.take_command_results();
            for (rid, result) in results {
                self.resolve_transfer(now, rid, result)?;
            }
            Ok(())
        } else {
            self.resolve_transfer(now, request_id, Ok(()))
        }
    }

    fn apply_config_update(
        &mut self,
        now: SimMs,
        path: &str,
        option: &str,
        value: ConfigValue,
    ) -> Result<(), SimError> {
        match &mut self.manager {
            Manager::Off => Ok(()),
            Manager::InProcess { monitor, config } => {
                let change = config
                    .set_value(path, option, value)
                    .map_err(|e| SimError::Scenario(e.to_string()))?;
                if let Some(change) = change {
                    if change.path == "server/policy/overload" && change.option == "check_interval" {
                        if let Some(seconds) = change.new.as_i64() {
                            monitor.set_check_interval_s(seconds as u64);
                        }
                    }
                    self.trace(now, "config_update", "", "", &format!("{path}/{option}"));
                }
                Ok(())
            }
            Manager::Networked { server, agents } => {
                let changed = server
                    .set_config_value(path, option, value)
                    .map_err(|e| SimError::Scenario(e.to_string()))?;
                if changed {
                    // Deliver pushed ConfigChanged frames to their agents.
                    let conn_ids: Vec<(NodeId, crate::wire::ConnId)> =
                        agents.iter().map(|(n, a)| (n.clone(), a.conn_id)).collect();
                    for (node, conn) in conn_ids {
                        let frames = server.take_outbox(conn);
                        if frames.is_empty() {
                            continue;
                        }
                        let agent = agents.get_mut(&node).unwrap();
                        agent
                            .decode_pushes(frames)
                            .map_err(|e| SimError::Scenario(e.to_string()))?;
                    }
                    self.trace(now, "config_update", "", "", &format!("{path}/{option}"));
                }
                Ok(())
            }
        }
    }

    fn series_sample(&mut self, now: SimMs) {
        let node_ids: Vec<NodeId> = self.world.nodes.keys().cloned().collect();
        for node_id in &node_ids {
            self.update_cpu(node_id);
        }
        let time_s = now / 1000;
        for container in self.world.containers.values() {
            let node = &self.world.nodes[&container.host];
            let privvm = container.ubc.get(ParamId::Privvmpages);
            let oomguar = container.ubc.get(ParamId::Oomguarpages);
            self.series.push(SeriesRow {
                time_s,
                container: container.container_id.clone(),
                node: container.host.clone(),
                privvm_held: privvm.held,
                privvm_maxheld: privvm.maxheld,
                privvm_failcnt: privvm.failcnt,
                oomguar_held: oomguar.held,
                oomguar_maxheld: oomguar.maxheld,
                oomguar_failcnt: oomguar.failcnt,
                resident_pages: container.ubc.get(ParamId::Physpages).held,
                node_resident: node.resident_used,
                node_swap_used: node.swap_used,
                node_cpu: node.cpu_used,
            });
        }
        if self.workload_active() && now + 1000 <= self.horizon_ms {
            self.schedule(now + 1000, EventKind::SeriesSample);
        }
    }

    pub fn world(&self) -> &World {
        &self.world
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{ContainerSpec, NodeSpec, ScenarioSpec};
    use crate::simkernel::prefork::PreforkConfig;
    use crate::simkernel::workload::WorkloadSpec;
    use crate::ubc::MemoryProfile;

    fn base_scenario(profile_mib: (u64, u64, u64, u64)) -> ScenarioSpec {
        let mut spec = ScenarioSpec::new("unit");
        spec.horizon_s = 200;
        spec.nodes.push(NodeSpec {
            id: "bravo02".to_string(),
            ram_mib: 2048,
            swap_mib: 2048,
        });
        spec.profiles.push(MemoryProfile::from_mib(
            "p",
            profile_mib.0,
            profile_mib.1,
            profile_mib.2,
            profile_mib.3,
        ));
        spec.containers.push(ContainerSpec {
            id: "ct".to_string(),
            host: "bravo02".to_string(),
            profile: "p".to_string(),
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
    fn single_request_completes_in_base_service_time() {
        let mut spec = base_scenario((100, 128, 128, 132));
        spec.workloads[0].threads = 1;
        spec.workloads[0].loop_count = 1;
        spec.workloads[0].requests_per_loop = 1;
        let artifacts = run_scenario(&spec).unwrap();
        assert_eq!(artifacts.outcomes.len(), 1);
        let outcome = &artifacts.outcomes[0];
        assert!(outcome.ok);
        assert_eq!(outcome.response_ms(), 166);
        assert_eq!(artifacts.summary.fail_count, 0);
        assert_eq!(artifacts.summary.err_pct, 0.0);
    }

    #[test]
    fn identical_seed_gives_bit_identical_runs() {
        let spec = base_scenario((100, 128, 128, 132));
        let a = run_scenario(&spec).unwrap();
        let b = run_scenario(&spec).unwrap();
        assert_eq!(a.outcomes, b.outcomes);
        assert_eq!(a.summary, b.summary);
        let kinds_a: Vec<&str> = a.trace.iter().map(|t| t.kind).collect();
        let kinds_b: Vec<&str> = b.trace.iter().map(|t| t.kind).collect();
        assert_eq!(kinds_a, kinds_b);
    }

    #[test]
    fn different_seed_gives_different_trace_same_invariants() {
        let mut spec = base_scenario((100, 128, 128, 132));
        let a = run_scenario(&spec).unwrap();
        spec.seed = 43;
        let b = run_scenario(&spec).unwrap();
        assert_ne!(a.outcomes, b.outcomes);
        assert_eq!(a.outcomes.len(), b.outcomes.len());
        assert_eq!(b.summary.fail_count, 0);
    }

    #[test]
    fn starved_profile_denies_spawns_and_queues_requests() {
        // A profile so tight that extra workers never fit: barriers stop
        // where the boot footprint plus a worker or two lands.
        let spec = base_scenario((60, 64, 64, 66));
        let artifacts = run_scenario(&spec).unwrap();
        assert!(artifacts.summary.fail_count > 0, "spawns were denied");
        assert!(
            artifacts.trace.iter().any(|t| t.kind == "spawn_denied"),
            "spawn denials traced"
        );
        assert!(
            artifacts.trace.iter().any(|t| t.kind == "request_queued"),
            "requests queued while the pool was starved"
        );
        // All requests still finish eventually.
        assert_eq!(artifacts.outcomes.len(), 360);
    }

    #[test]
    fn response_floor_holds_for_successful_requests() {
        let spec = base_scenario((60, 64, 64, 66));
        let artifacts = run_scenario(&spec).unwrap();
        for outcome in artifacts.outcomes.iter().filter(|o| o.ok) {
            assert!(outcome.response_ms() >= 166);
        }
    }

    #[test]
    fn worker_pool_stays_within_spares_when_unthrottled() {
        let mut spec = base_scenario((100, 128, 128, 132));
        spec.workloads[0].threads = 3;
        let artifacts = run_scenario(&spec).unwrap();
        // After the run the pool has settled back toward max_spare.
        let spawned = artifacts.trace.iter().filter(|t| t.kind == "worker_spawned").count();
        let killed = artifacts.trace.iter().filter(|t| t.kind == "worker_killed").count();
        assert!(spawned >= 1);
        assert!(killed >= 1, "idle surplus was trimmed");
        assert_eq!(artifacts.summary.err_pct, 0.0);
    }

    #[test]
    fn spawn_attempts_respect_one_per_second() {
        let spec = base_scenario((60, 64, 64, 66));
        let artifacts = run_scenario(&spec).unwrap();
        let mut attempts: Vec<SimMs> = artifacts
            .trace
            .iter()
            .filter(|t| t.kind == "worker_spawned" || t.kind == "spawn_denied")
            .map(|t| t.time_ms)
            .collect();
        attempts.sort();
        for pair in attempts.windows(2) {
            assert!(pair[1] - pair[0] >= 1000, "attempts at {} and {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn malformed_scenario_is_rejected() {
        let mut spec = base_scenario((100, 128, 128, 132));
        spec.workloads[0].target = "ghost".to_string();
        assert!(matches!(run_scenario(&spec), Err(SimError::Scenario(_))));
    }

    #[test]
    fn injected_fault_trips_the_conservation_check() {
        let mut spec = base_scenario((100, 128, 128, 132));
        spec.inject_fault = Some(FaultKind::LeakResident);
        let err = run_scenario(&spec).unwrap_err();
        assert!(matches!(err, SimError::InvariantViolation { .. }));
    }
}
