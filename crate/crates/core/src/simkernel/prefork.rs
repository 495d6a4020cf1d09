//! Prefork web-server state: a bounded pool of single-connection worker
//! processes, spare management, and the FIFO queue of connections waiting
//! for a worker.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{Pid, SimMs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreforkConfig {
    pub start_servers: u32,
    pub min_spare: u32,
    pub max_spare: u32,
    pub max_clients: u32,
    pub keepalive_enabled: bool,
    pub keepalive_timeout_ms: SimMs,
}

impl Default for PreforkConfig {
    fn default() -> Self {
        PreforkConfig {
            start_servers: 4,
            min_spare: 2,
            max_spare: 4,
            max_clients: 128,
            keepalive_enabled: true,
            keepalive_timeout_ms: 5000,
        }
    }
}

/// Connection binding of one worker. A worker dedicated to a persistent
/// connection is not idle even between requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerBinding {
    Idle,
    Bound { connection: u64, busy: bool },
}

#[derive(Debug, Clone)]
pub struct Worker {
    pub pid: Pid,
    pub binding: WorkerBinding,
    pub served_php: bool,
    pub idle_since: SimMs,
    /// Bumped on every (re)binding; stale keep-alive timers check it.
    pub generation: u64,
}

impl Worker {
    pub fn is_idle(&self) -> bool {
        self.binding == WorkerBinding::Idle
    }

    pub fn is_busy(&self) -> bool {
        matches!(self.binding, WorkerBinding::Bound { busy: true, .. })
    }
}

/// A connection waiting for a worker.
#[derive(Debug, Clone)]
pub struct PendingRequest {
    pub connection: u64,
    pub issued_ms: SimMs,
}

#[derive(Debug, Clone)]
pub struct PreforkState {
    pub config: PreforkConfig,
    pub parent_pid: Pid,
    pub workers: BTreeMap<Pid, Worker>,
    pub pending: VecDeque<PendingRequest>,
    /// Time of the last spawn attempt; attempts are limited to one per
    /// simulated second whether or not the fork is granted.
    pub last_spawn_ms: Option<SimMs>,
}

impl PreforkState {
    pub fn new(config: PreforkConfig, parent_pid: Pid) -> Self {
        PreforkState {
            config,
            parent_pid,
            workers: BTreeMap::new(),
            pending: VecDeque::new(),
            last_spawn_ms: None,
        }
    }

    pub fn add_worker(&mut self, pid: Pid, now: SimMs) {
        self.workers.insert(
            pid,
            Worker {
                pid,
                binding: WorkerBinding::Idle,
                served_php: false,
                idle_since: now,
                generation: 0,
            },
        );
    }

    pub fn idle_count(&self) -> u32 {
        self.workers.values().filter(|w| w.is_idle()).count() as u32
    }

    pub fn busy_count(&self) -> u32 {
        self.workers.values().filter(|w| w.is_busy()).count() as u32
    }

    pub fn bound_count(&self) -> u32 {
        self.workers.values().filter(|w| !w.is_idle()).count() as u32
    }

    /// Connections currently being processed: dedicated workers plus the
    /// accept queue.
    pub fn concurrent_connections(&self) -> u32 {
        self.bound_count() + self.pending.len() as u32
    }

    /// Smallest-pid idle worker, mirroring the parent handing the
    /// connection to the first free child.
    pub fn first_idle(&self) -> Option<Pid> {
        self.workers.values().find(|w| w.is_idle()).map(|w| w.pid)
    }

    /// Longest-idle worker, the one a spare trim kills first.
    pub fn longest_idle(&self) -> Option<Pid> {
        self.workers
            .values()
            .filter(|w| w.is_idle())
            .min_by_key(|w| (w.idle_since, w.pid))
            .map(|w| w.pid)
    }

    pub fn spawn_allowed(&self, now: SimMs) -> bool {
        match self.last_spawn_ms {
            None => true,
            Some(last) => now.saturating_sub(last) >= 1000,
        }
    }

    pub fn worker(&self, pid: Pid) -> &Worker {
        &self.workers[&pid]
    }

    pub fn worker_mut(&mut self, pid: Pid) -> &mut Worker {
        self.workers.get_mut(&pid).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_with_workers(n: u32) -> PreforkState {
        let mut state = PreforkState::new(PreforkConfig::default(), 1);
        for pid in 0..n {
            state.add_worker(100 + pid as Pid, 0);
        }
        state
    }

    #[test]
    fn idle_accounting_distinguishes_bound_from_busy() {
        let mut state = state_with_workers(4);
        assert_eq!(state.idle_count(), 4);
        state.worker_mut(100).binding = WorkerBinding::Bound {
            connection: 1,
            busy: true,
        };
        state.worker_mut(101).binding = WorkerBinding::Bound {
            connection: 2,
            busy: false,
        };
        assert_eq!(state.idle_count(), 2);
        assert_eq!(state.busy_count(), 1);
        assert_eq!(state.bound_count(), 2);
        // A keep-alive connection holds its worker: not idle.
        assert_eq!(state.first_idle(), Some(102));
    }

    #[test]
    fn spawn_rate_is_one_per_second() {
        let mut state = state_with_workers(0);
        assert!(state.spawn_allowed(0));
        state.last_spawn_ms = Some(0);
        assert!(!state.spawn_allowed(999));
        assert!(state.spawn_allowed(1000));
    }

    #[test]
    fn longest_idle_picks_earliest_idle_since() {
        let mut state = state_with_workers(3);
        state.worker_mut(100).idle_since = 30;
        state.worker_mut(101).idle_since = 10;
        state.worker_mut(102).idle_since = 20;
        assert_eq!(state.longest_idle(), Some(101));
    }
}
