//! Cluster state: hardware nodes with RAM/swap pools, containers with
//! their beancounter tables and processes, demand paging with
//! least-recently-touched eviction, and the out-of-memory killer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::policy::{ContainerId, NodeId};
use crate::ubc::{Bound, ChargeResult, ParamId, UbcTable};

use super::prefork::PreforkState;
use super::{Pid, SimError, SimMs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcessRole {
    Init,
    Service,
    HttpParent,
    HttpWorker,
    Checkpoint,
    Other,
}

#[derive(Debug, Clone)]
pub struct SimProcess {
    pub pid: Pid,
    pub role: ProcessRole,
    /// Private virtual pages allocated (charged to privvmpages).
    pub virtual_pages: u64,
    /// Touched pages currently backed by RAM.
    pub resident_pages: u64,
    /// Touched pages evicted to swap.
    pub swapped_pages: u64,
    pub niceness: i32,
    pub is_root: bool,
    pub interacts_with_hardware: bool,
    pub is_kernel_thread: bool,
    pub start_time_ms: SimMs,
    pub last_touch_ms: SimMs,
    pub parent: Option<Pid>,
}

impl SimProcess {
    pub fn touched_pages(&self) -> u64 {
        self.resident_pages + self.swapped_pages
    }

    pub fn immune(&self) -> bool {
        self.is_kernel_thread || self.role == ProcessRole::Init
    }
}

/// Parameters for creating a process.
#[derive(Debug, Clone)]
pub struct ProcessSpec {
    pub role: ProcessRole,
    pub virtual_pages: u64,
    pub niceness: i32,
    pub is_root: bool,
    pub interacts_with_hardware: bool,
    pub is_kernel_thread: bool,
    pub parent: Option<Pid>,
}

impl ProcessSpec {
    pub fn new(role: ProcessRole, virtual_pages: u64) -> Self {
        ProcessSpec {
            role,
            virtual_pages,
            niceness: 0,
            is_root: false,
            interacts_with_hardware: false,
            is_kernel_thread: false,
            parent: None,
        }
    }

    pub fn root(mut self) -> Self {
        self.is_root = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub node_id: NodeId,
    pub ram_pages: u64,
    pub swap_pages: u64,
    pub resident_used: u64,
    pub swap_used: u64,
    pub busy_with_transfer: bool,
    pub cpu_capacity: f64,
    pub cpu_used: f64,
}

impl Node {
    pub fn new(node_id: &str, ram_pages: u64, swap_pages: u64) -> Self {
        Node {
            node_id: node_id.to_string(),
            ram_pages,
            swap_pages,
            resident_used: 0,
            swap_used: 0,
            busy_with_transfer: false,
            cpu_capacity: 1.0,
            cpu_used: 0.0,
        }
    }

    pub fn free_ram(&self) -> u64 {
        self.ram_pages - self.resident_used
    }

    pub fn free_swap(&self) -> u64 {
        self.swap_pages - self.swap_used
    }

    pub fn has_free(&self, pages: u64) -> bool {
        self.free_ram() + self.free_swap() >= pages
    }
}

#[derive(Debug, Clone)]
pub struct Container {
    pub container_id: ContainerId,
    pub host: NodeId,
    pub ubc: UbcTable,
    pub processes: BTreeMap<Pid, SimProcess>,
    pub web: Option<PreforkState>,
    pub replica_group: Option<String>,
    pub profile_name: String,
}

impl Container {
    pub fn new(container_id: &str, host: &str) -> Self {
        Container {
            container_id: container_id.to_string(),
            host: host.to_string(),
            ubc: UbcTable::new(),
            processes: BTreeMap::new(),
            web: None,
            replica_group: None,
            profile_name: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TouchResult {
    /// Pages fit in free physical memory.
    Resident,
    /// Pages of other processes were evicted to swap to make room.
    SwappedOthers,
    /// RAM and swap are both exhausted; the caller must run the
    /// out-of-memory killer.
    OomTriggered,
}

/// Per-process badness score for out-of-memory victim selection. The
/// constants are tuned only to preserve the ordering the criteria
/// describe: bigger processes score higher, positive niceness raises the
/// score, root and hardware-facing processes score a quarter, and age
/// discounts logarithmically.
pub fn oom_badness(
    process: &SimProcess,
    children_virtual_pages: u64,
    now_ms: SimMs,
) -> Result<f64, SimError> {
    if process.immune() {
        return Err(SimError::ImmuneProcess { pid: process.pid });
    }
    let mut score = process.virtual_pages as f64 + children_virtual_pages as f64 / 2.0;
    if process.niceness > 0 {
        score *= 1.0 + process.niceness as f64 / 20.0;
    }
    if process.is_root {
        score /= 4.0;
    }
    if process.interacts_with_hardware {
        score /= 4.0;
    }
    let age_seconds = now_ms.saturating_sub(process.start_time_ms) as f64 / 1000.0;
    score /= 1.0 + (1.0 + age_seconds).log2();
    Ok(score)
}

#[derive(Debug, Default)]
pub struct World {
    pub nodes: BTreeMap<NodeId, Node>,
    pub containers: BTreeMap<ContainerId, Container>,
    /// Processes running on the hardware nodes themselves. Covered by the
    /// node's implicit unlimited guarantee, so never OOM victims.
    pub host_processes: BTreeMap<NodeId, BTreeMap<Pid, SimProcess>>,
    pub now_ms: SimMs,
    next_pid: Pid,
}

impl World {
    pub fn new() -> Self {
        World {
            next_pid: 1,
            ..Default::default()
        }
    }

    pub fn add_node(&mut self, node: Node) {
        self.host_processes
            .entry(node.node_id.clone())
            .or_default();
        self.nodes.insert(node.node_id.clone(), node);
    }

    pub fn node(&self, node_id: &str) -> &Node {
        &self.nodes[node_id]
    }

    pub fn container(&self, container_id: &str) -> &Container {
        &self.containers[container_id]
    }

    pub fn container_mut(&mut self, container_id: &str) -> &mut Container {
        self.containers.get_mut(container_id).unwrap()
    }

    fn allocate_pid(&mut self) -> Pid {
        let pid = self.next_pid;
        self.next_pid += 1;
        pid
    }

    pub fn host_of(&self, container_id: &str) -> NodeId {
        self.containers[container_id].host.clone()
    }

    pub fn node_has_free(&self, node_id: &str, pages: u64) -> bool {
        self.nodes[node_id].has_free(pages)
    }

    /// Create a process in a container, charging its private pages
    /// against the beancounters. Returns `Ok(None)` when the charge is
    /// denied; the denial has already been counted.
    pub fn spawn_process(
        &mut self,
        container_id: &str,
        spec: ProcessSpec,
        kmem_bytes: u64,
        high_priority: bool,
    ) -> Result<Option<Pid>, SimError> {
        let host = self.host_of(container_id);
        let host_has_free = self.node_has_free(&host, spec.virtual_pages);
        let now = self.now_ms;
        let pid = self.allocate_pid();
        let container = self.containers.get_mut(container_id).unwrap();
        if spec.virtual_pages > 0 {
            let result = container
                .ubc
                .charge_privvm(spec.virtual_pages, host_has_free, high_priority);
            if result == ChargeResult::Denied {
                return Ok(None);
            }
        }
        container.ubc.charge(ParamId::Kmemsize, kmem_bytes);
        container.processes.insert(
            pid,
            SimProcess {
                pid,
                role: spec.role,
                virtual_pages: spec.virtual_pages,
                resident_pages: 0,
                swapped_pages: 0,
                niceness: spec.niceness,
                is_root: spec.is_root,
                interacts_with_hardware: spec.interacts_with_hardware,
                is_kernel_thread: spec.is_kernel_thread,
                start_time_ms: now,
                last_touch_ms: now,
                parent: spec.parent,
            },
        );
        Ok(Some(pid))
    }

    /// Create a process owned by the hardware node itself.
    pub fn spawn_host_process(&mut self, node_id: &str, spec: ProcessSpec) -> Pid {
        let pid = self.allocate_pid();
        let now = self.now_ms;
        self.host_processes.get_mut(node_id).unwrap().insert(
            pid,
            SimProcess {
                pid,
                role: spec.role,
                virtual_pages: spec.virtual_pages,
                resident_pages: 0,
                swapped_pages: 0,
                niceness: spec.niceness,
                is_root: spec.is_root,
                interacts_with_hardware: spec.interacts_with_hardware,
                is_kernel_thread: spec.is_kernel_thread,
                start_time_ms: now,
                last_touch_ms: now,
                parent: spec.parent,
            },
        );
        pid
    }

    /// Grow a process's private allocation. Denials are counted by the
    /// beancounter.
    pub fn grow_process(
        &mut self,
        container_id: &str,
        pid: Pid,
        pages: u64,
        high_priority: bool,
    ) -> ChargeResult {
        let host = self.host_of(container_id);
        let host_has_free = self.node_has_free(&host, pages);
        let container = self.containers.get_mut(container_id).unwrap();
        let result = container
            .ubc
            .charge_privvm(pages, host_has_free, high_priority);
        if result == ChargeResult::Granted {
            container.processes.get_mut(&pid).unwrap().virtual_pages += pages;
        }
        result
    }

    /// Back `pages` of a container process's allocation with physical
    /// frames. New pages always land in RAM; when RAM is full, the
    /// least-recently-touched pages of other processes on the node are
    /// evicted to swap to make room.
    pub fn touch_pages(
        &mut self,
        container_id: &str,
        pid: Pid,
        pages: u64,
    ) -> Result<TouchResult, SimError> {
        let host = self.host_of(container_id);
        let now = self.now_ms;
        {
            let process = &self.containers[container_id].processes[&pid];
            debug_assert!(
                pages <= process.virtual_pages - process.touched_pages(),
                "touch beyond allocation"
            );
        }

        let free_ram = self.nodes[&host].free_ram();
        let evicted = if free_ram >= pages {
            0
        } else {
            let need = pages - free_ram;
            let free_swap = self.nodes[&host].free_swap();
            let evictable = self.evictable_pages(&host, container_id, pid);
            if need > free_swap.min(evictable) {
                return Ok(TouchResult::OomTriggered);
            }
            self.evict_lru(&host, container_id, pid, need);
            need
        };

        let node = self.nodes.get_mut(&host).unwrap();
        node.resident_used += pages;
        let container = self.containers.get_mut(container_id).unwrap();
        let process = container.processes.get_mut(&pid).unwrap();
        process.resident_pages += pages;
        process.last_touch_ms = now;
        container.ubc.charge(ParamId::Oomguarpages, pages);
        container.ubc.charge(ParamId::Physpages, pages);
        Ok(if evicted == 0 {
            TouchResult::Resident
        } else {
            TouchResult::SwappedOthers
        })
    }

    /// Touch pages of a host-owned process.
    pub fn touch_host_pages(
        &mut self,
        node_id: &str,
        pid: Pid,
        pages: u64,
    ) -> Result<TouchResult, SimError> {
        let now = self.now_ms;
        let free_ram = self.nodes[node_id].free_ram();
        let evicted = if free_ram >= pages {
            0
        } else {
            let need = pages - free_ram;
            let free_swap = self.nodes[node_id].free_swap();
            let evictable = self.evictable_pages(node_id, "", pid);
            if need > free_swap.min(evictable) {
                return Ok(TouchResult::OomTriggered);
            }
            self.evict_lru(node_id, "", pid, need);
            need
        };
        let node = self.nodes.get_mut(node_id).unwrap();
        node.resident_used += pages;
        let process = self
            .host_processes
            .get_mut(node_id)
            .unwrap()
            .get_mut(&pid)
            .unwrap();
        process.resident_pages += pages;
        process.last_touch_ms = now;
        Ok(if evicted == 0 {
            TouchResult::Resident
        } else {
            TouchResult::SwappedOthers
        })
    }

    fn evictable_pages(&self, node_id: &str, skip_container: &str, skip_pid: Pid) -> u64 {
        let mut total = 0;
        for container in self.containers.values().filter(|c| c.host == node_id) {
            for process in container.processes.values() {
                if container.container_id == skip_container && process.pid == skip_pid {
                    continue;
                }
                total += process.resident_pages;
            }
        }
        for process in self.host_processes[node_id].values() {
            if skip_container.is_empty() && process.pid == skip_pid {
                continue;
            }
            total += process.resident_pages;
        }
        total
    }

    /// Move `need` resident pages of other processes on the node to swap,
    /// oldest last-touch first.
    fn evict_lru(&mut self, node_id: &str, skip_container: &str, skip_pid: Pid, mut need: u64) {
        // (last_touch, container or empty for host, pid)
        let mut victims: Vec<(SimMs, String, Pid)> = Vec::new();
        for container in self.containers.values().filter(|c| c.host == node_id) {
            for process in container.processes.values() {
                if container.container_id == skip_container && process.pid == skip_pid {
                    continue;
                }
                if process.resident_pages > 0 {
                    victims.push((
                        process.last_touch_ms,
                        container.container_id.clone(),
                        process.pid,
                    ));
                }
            }
        }
        for process in self.host_processes[node_id].values() {
            if skip_container.is_empty() && process.pid == skip_pid {
                continue;
            }
            if process.resident_pages > 0 {
                victims.push((process.last_touch_ms, String::new(), process.pid));
            }
        }
        victims.sort();

        for (_, container_id, pid) in victims {
            if need == 0 {
                break;
            }
            let resident = if container_id.is_empty() {
                self.host_processes[node_id][&pid].resident_pages
            } else {
                self.containers[&container_id].processes[&pid].resident_pages
            };
            let moved = resident.min(need);
            need -= moved;
            let node = self.nodes.get_mut(node_id).unwrap();
            node.resident_used -= moved;
            node.swap_used += moved;
            if container_id.is_empty() {
                let process = self
                    .host_processes
                    .get_mut(node_id)
                    .unwrap()
                    .get_mut(&pid)
                    .unwrap();
                process.resident_pages -= moved;
                process.swapped_pages += moved;
            } else {
                let container = self.containers.get_mut(&container_id).unwrap();
                let process = container.processes.get_mut(&pid).unwrap();
                process.resident_pages -= moved;
                process.swapped_pages += moved;
                container.ubc.uncharge(ParamId::Physpages, moved).unwrap();
            }
        }
        debug_assert_eq!(need, 0, "eviction feasibility was checked");
    }

    /// Terminate a container process, releasing its pages and kernel
    /// memory.
    pub fn exit_process(
        &mut self,
        container_id: &str,
        pid: Pid,
        kmem_bytes: u64,
    ) -> Result<(), SimError> {
        let host = self.host_of(container_id);
        let container = self.containers.get_mut(container_id).unwrap();
        let process = container
            .processes
            .remove(&pid)
            .expect("exit of unknown process");
        let node = self.nodes.get_mut(&host).unwrap();
        node.resident_used -= process.resident_pages;
        node.swap_used -= process.swapped_pages;
        container
            .ubc
            .uncharge(ParamId::Oomguarpages, process.touched_pages())?;
        container
            .ubc
            .uncharge(ParamId::Physpages, process.resident_pages)?;
        if process.virtual_pages > 0 {
            container
                .ubc
                .uncharge(ParamId::Privvmpages, process.virtual_pages)?;
        }
        container.ubc.uncharge(ParamId::Kmemsize, kmem_bytes)?;
        Ok(())
    }

    /// Total memory in actual use by a container for out-of-memory
    /// bookkeeping.
    fn container_oom_excess(&self, container: &Container) -> i64 {
        let usage = container.ubc.oom_usage_pages() as i64;
        let barrier = match container.ubc.get(ParamId::Oomguarpages).barrier {
            Bound::Finite(v) => v as i64,
            Bound::Unlimited => i64::MAX,
        };
        usage.saturating_sub(barrier)
    }

    /// Select and terminate the worst process on an exhausted node.
    ///
    /// Candidates come only from containers whose usage meets or exceeds
    /// their `oomguarpages` barrier; within that set, processes of the
    /// container with the largest excess are ranked first, then by
    /// badness. Kernel threads and init are immune; host processes sit
    /// under the node's unlimited guarantee. The victim's container gets
    /// `oomguarpages.failcnt` incremented.
    pub fn oom_kill(&mut self, node_id: &str, kmem_bytes: u64) -> Result<Pid, SimError> {
        let now = self.now_ms;
        let mut best: Option<(i64, f64, ContainerId, Pid)> = None;
        for container in self.containers.values().filter(|c| c.host == node_id) {
            let excess = self.container_oom_excess(container);
            if excess < 0 {
                continue;
            }
            for process in container.processes.values() {
                if process.immune() {
                    continue;
                }
                let children: u64 = container
                    .processes
                    .values()
                    .filter(|p| p.parent == Some(process.pid))
                    .map(|p| p.virtual_pages)
                    .sum();
                let badness = oom_badness(process, children, now)?;
                let candidate = (excess, badness, container.container_id.clone(), process.pid);
                let better = match &best {
                    None => true,
                    Some((be, bb, _, bp)) => {
                        (excess, badness) > (*be, *bb)
                            || ((excess, badness) == (*be, *bb) && process.pid < *bp)
                    }
                };
                if better {
                    best = Some(candidate);
                }
            }
        }
        let Some((_, _, container_id, pid)) = best else {
            return Err(SimError::NoKillableProcess {
                node: node_id.to_string(),
            });
        };
        self.exit_process(&container_id, pid, kmem_bytes)?;
        self.containers
            .get_mut(&container_id)
            .unwrap()
            .ubc
            .get_mut(ParamId::Oomguarpages)
            .failcnt += 1;
        Ok(pid)
    }

    /// Atomically move a container to another node: its backed pages
    /// leave the source pools and land on the target, RAM first.
    pub fn rehost_container(&mut self, container_id: &str, target_node: &str) {
        let source = self.host_of(container_id);
        let container = self.containers.get_mut(container_id).unwrap();
        let mut total_touched = 0;
        let mut old_resident = 0;
        for process in container.processes.values() {
            total_touched += process.touched_pages();
            old_resident += process.resident_pages;
        }
        {
            let src = self.nodes.get_mut(&source).unwrap();
            src.resident_used -= old_resident;
            src.swap_used -= total_touched - old_resident;
        }
        let (free_ram, _free_swap) = {
            let dst = self.nodes.get(target_node).unwrap();
            (dst.free_ram(), dst.free_swap())
        };
        let container = self.containers.get_mut(container_id).unwrap();
        let mut ram_left = free_ram;
        let mut new_resident = 0;
        for process in container.processes.values_mut() {
            let touched = process.touched_pages();
            let to_ram = touched.min(ram_left);
            ram_left -= to_ram;
            process.resident_pages = to_ram;
            process.swapped_pages = touched - to_ram;
            new_resident += to_ram;
        }
        let dst = self.nodes.get_mut(target_node).unwrap();
        dst.resident_used += new_resident;
        dst.swap_used += total_touched - new_resident;

        let container = self.containers.get_mut(container_id).unwrap();
        container.host = target_node.to_string();
        let physpages = container.ubc.get_mut(ParamId::Physpages);
        let old = physpages.held;
        physpages.held = new_resident;
        physpages.maxheld = physpages.maxheld.max(new_resident);
        let _ = old;
    }

    /// Verify the conservation and per-container accounting identities.
    pub fn check_invariants(&self) -> Result<(), SimError> {
        for node in self.nodes.values() {
            let mut touched = 0;
            let mut resident = 0;
            for container in self.containers.values().filter(|c| c.host == node.node_id) {
                let mut ct_virtual = 0;
                let mut ct_touched = 0;
                let mut ct_resident = 0;
                for process in container.processes.values() {
                    ct_virtual += process.virtual_pages;
                    ct_touched += process.touched_pages();
                    ct_resident += process.resident_pages;
                }
                let ubc = &container.ubc;
                if ubc.get(ParamId::Privvmpages).held != ct_virtual {
                    return Err(self.invariant_error(format!(
                        "{}: privvmpages held {} != sum of process allocations {}",
                        container.container_id,
                        ubc.get(ParamId::Privvmpages).held,
                        ct_virtual
                    )));
                }
                if ubc.get(ParamId::Oomguarpages).held != ct_touched {
                    return Err(self.invariant_error(format!(
                        "{}: oomguarpages held {} != sum of touched pages {}",
                        container.container_id,
                        ubc.get(ParamId::Oomguarpages).held,
                        ct_touched
                    )));
                }
                if ubc.get(ParamId::Physpages).held != ct_resident {
                    return Err(self.invariant_error(format!(
                        "{}: physpages held {} != sum of resident pages {}",
                        container.container_id,
                        ubc.get(ParamId::Physpages).held,
                        ct_resident
                    )));
                }
                touched += ct_touched;
                resident += ct_resident;
            }
            for process in self.host_processes[&node.node_id].values() {
                touched += process.touched_pages();
                resident += process.resident_pages;
            }
            if node.resident_used + node.swap_used != touched {
                return Err(self.invariant_error(format!(
                    "{}: pool usage {}+{} != touched pages {}",
                    node.node_id, node.resident_used, node.swap_used, touched
                )));
            }
            if node.resident_used != resident {
                return Err(self.invariant_error(format!(
                    "{}: resident_used {} != sum of resident pages {}",
                    node.node_id, node.resident_used, resident
                )));
            }
            if node.resident_used > node.ram_pages || node.swap_used > node.swap_pages {
                return Err(self.invariant_error(format!("{}: pool overflow", node.node_id)));
            }
        }
        Ok(())
    }

    fn invariant_error(&self, message: String) -> SimError {
        SimError::InvariantViolation {
            at_ms: self.now_ms,
            message,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ubc::MemoryProfile;

    fn world_with_node(ram: u64, swap: u64) -> World {
        let mut world = World::new();
        world.add_node(Node::new("n1", ram, swap));
        world
    }

    fn add_container(world: &mut World, id: &str, oom_mib: u64) -> ContainerId {
        let mut container = Container::new(id, "n1");
        MemoryProfile::from_mib("p", oom_mib, oom_mib + 4, oom_mib + 4, oom_mib + 6)
            .apply_to(&mut container.ubc);
        world.containers.insert(id.to_string(), container);
        id.to_string()
    }

    fn spawn_touched(world: &mut World, ct: &str, pages: u64) -> Pid {
        let pid = world
            .spawn_process(ct, ProcessSpec::new(ProcessRole::Other, pages), 0, false)
            .unwrap()
            .unwrap();
        assert_ne!(
            world.touch_pages(ct, pid, pages).unwrap(),
            TouchResult::OomTriggered
        );
        pid
    }

    #[test]
    fn touch_with_ample_memory_is_resident() {
        let mut world = world_with_node(100, 100);
        let ct = add_container(&mut world, "ct", 4096);
        let pid = world
            .spawn_process(&ct, ProcessSpec::new(ProcessRole::Other, 60), 0, false)
            .unwrap()
            .unwrap();
        assert_eq!(world.touch_pages(&ct, pid, 50).unwrap(), TouchResult::Resident);
        assert_eq!(world.node("n1").resident_used, 50);
        assert_eq!(world.container(&ct).ubc.get(ParamId::Oomguarpages).held, 50);
        assert_eq!(world.container(&ct).ubc.get(ParamId::Physpages).held, 50);
        world.check_invariants().unwrap();
    }

    #[test]
    fn full_ram_evicts_least_recently_touched_first() {
        let mut world = world_with_node(100, 100);
        let ct = add_container(&mut world, "ct", 4096);
        world.now_ms = 1000;
        let old = spawn_touched(&mut world, &ct, 60);
        world.now_ms = 2000;
        let newer = spawn_touched(&mut world, &ct, 40);
        world.now_ms = 3000;
        let pid = world
            .spawn_process(&ct, ProcessSpec::new(ProcessRole::Other, 30), 0, false)
            .unwrap()
            .unwrap();
        assert_eq!(
            world.touch_pages(&ct, pid, 30).unwrap(),
            TouchResult::SwappedOthers
        );
        // The oldest process lost pages to swap; the newer one kept its.
        let container = world.container(&ct);
        assert_eq!(container.processes[&old].swapped_pages, 30);
        assert_eq!(container.processes[&newer].swapped_pages, 0);
        assert_eq!(world.node("n1").swap_used, 30);
        // Touched pages still counted, resident ones reduced.
        assert_eq!(container.ubc.get(ParamId::Oomguarpages).held, 130);
        assert_eq!(container.ubc.get(ParamId::Physpages).held, 100);
        world.check_invariants().unwrap();
    }

    #[test]
    fn exhausted_ram_and_swap_triggers_oom() {
        let mut world = world_with_node(100, 20);
        let ct = add_container(&mut world, "ct", 4096);
        spawn_touched(&mut world, &ct, 100);
        let pid = world
            .spawn_process(&ct, ProcessSpec::new(ProcessRole::Other, 40), 0, false)
            .unwrap()
            .unwrap();
        assert_eq!(
            world.touch_pages(&ct, pid, 40).unwrap(),
            TouchResult::OomTriggered
        );
        world.check_invariants().unwrap();
    }

    #[test]
    fn badness_prefers_larger_processes() {
        let mut world = world_with_node(1000, 0);
        let ct = add_container(&mut world, "ct", 4096);
        let big = spawn_touched(&mut world, &ct, 200);
        let small = spawn_touched(&mut world, &ct, 10);
        let container = world.container(&ct);
        let b_big = oom_badness(&container.processes[&big], 0, 0).unwrap();
        let b_small = oom_badness(&container.processes[&small], 0, 0).unwrap();
        assert!(b_big > b_small);
    }

    #[test]
    fn badness_reduces_for_root_and_age() {
        let mut world = world_with_node(1000, 0);
        let ct = add_container(&mut world, "ct", 4096);
        let plain = spawn_touched(&mut world, &ct, 100);
        let pid = world
            .spawn_process(
                &ct,
                ProcessSpec::new(ProcessRole::Other, 100).root(),
                0,
                false,
            )
            .unwrap()
            .unwrap();
        world.touch_pages(&ct, pid, 100).unwrap();
        let container = world.container(&ct);
        let b_plain = oom_badness(&container.processes[&plain], 0, 0).unwrap();
        let b_root = oom_badness(&container.processes[&pid], 0, 0).unwrap();
        assert!(b_root < b_plain);

        let b_young = oom_badness(&container.processes[&plain], 0, 0).unwrap();
        let b_old = oom_badness(&container.processes[&plain], 0, 3_600_000).unwrap();
        assert!(b_old < b_young);
    }

    #[test]
    fn badness_rejects_immune_processes() {
        let mut process = SimProcess {
            pid: 1,
            role: ProcessRole::Init,
            virtual_pages: 10,
            resident_pages: 10,
            swapped_pages: 0,
            niceness: 0,
            is_root: true,
            interacts_with_hardware: false,
            is_kernel_thread: false,
            start_time_ms: 0,
            last_touch_ms: 0,
            parent: None,
        };
        assert!(matches!(
            oom_badness(&process, 0, 0),
            Err(SimError::ImmuneProcess { .. })
        ));
        process.role = ProcessRole::Other;
        process.is_kernel_thread = true;
        assert!(matches!(
            oom_badness(&process, 0, 0),
            Err(SimError::ImmuneProcess { .. })
        ));
    }

    #[test]
    fn oom_kill_picks_the_container_with_largest_excess() {
        let mut world = world_with_node(10000, 0);
        // A exceeds its barrier by far; B stays under guarantee.
        let a = add_container(&mut world, "a", 1); // barrier 256 pages
        let b = add_container(&mut world, "b", 4096);
        spawn_touched(&mut world, &a, 300);
        spawn_touched(&mut world, &a, 456);
        let huge_b = spawn_touched(&mut world, &b, 5000);
        let victim = world.oom_kill("n1", 0).unwrap();
        let a_pids: Vec<Pid> = world.container(&a).processes.keys().copied().collect();
        assert!(!a_pids.contains(&victim) || a_pids.len() == 1);
        assert_ne!(victim, huge_b, "guaranteed container must be spared");
        assert_eq!(
            world.container(&a).ubc.get(ParamId::Oomguarpages).failcnt,
            1
        );
        assert_eq!(
            world.container(&b).ubc.get(ParamId::Oomguarpages).failcnt,
            0
        );
        world.check_invariants().unwrap();
    }

    #[test]
    fn oom_kill_with_everyone_guaranteed_fails() {
        let mut world = world_with_node(100, 0);
        let ct = add_container(&mut world, "ct", 4096);
        spawn_touched(&mut world, &ct, 50);
        // Host kernel thread eats the rest of the node.
        let mut spec = ProcessSpec::new(ProcessRole::Other, 50);
        spec.is_kernel_thread = true;
        let pid = world.spawn_host_process("n1", spec);
        world.touch_host_pages("n1", pid, 50).unwrap();
        assert!(matches!(
            world.oom_kill("n1", 0),
            Err(SimError::NoKillableProcess { .. })
        ));
    }

    #[test]
    fn failcnt_increments_once_per_kill() {
        let mut world = world_with_node(10000, 0);
        let ct = add_container(&mut world, "ct", 1);
        spawn_touched(&mut world, &ct, 300);
        spawn_touched(&mut world, &ct, 300);
        world.oom_kill("n1", 0).unwrap();
        world.oom_kill("n1", 0).unwrap();
        assert_eq!(
            world.container(&ct).ubc.get(ParamId::Oomguarpages).failcnt,
            2
        );
    }

    #[test]
    fn rehost_moves_pages_and_keeps_conservation() {
        let mut world = world_with_node(1000, 1000);
        world.add_node(Node::new("n2", 1000, 1000));
        let ct = add_container(&mut world, "ct", 4096);
        spawn_touched(&mut world, &ct, 600);
        world.rehost_container(&ct, "n2");
        assert_eq!(world.container(&ct).host, "n2");
        assert_eq!(world.node("n1").resident_used, 0);
        assert_eq!(world.node("n2").resident_used, 600);
        assert_eq!(world.container(&ct).ubc.get(ParamId::Physpages).held, 600);
        world.check_invariants().unwrap();
    }

    #[test]
    fn denied_spawn_counts_and_leaves_no_process() {
        let mut world = world_with_node(100000, 0);
        let ct = add_container(&mut world, "tiny", 1);
        // barrier 256+4*256? profile: oom 1 MiB → privvm barrier 5·256?
        // The profile gives privvm barrier (1+4) MiB = 1280 pages, limit 1792.
        let pid = world
            .spawn_process(&ct, ProcessSpec::new(ProcessRole::Other, 2000), 0, false)
            .unwrap();
        assert!(pid.is_none());
        assert_eq!(world.container(&ct).ubc.get(ParamId::Privvmpages).failcnt, 1);
        assert!(world.container(&ct).processes.is_empty());
    }
}
