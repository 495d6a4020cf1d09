//! Deterministic discrete-event simulation of hardware nodes, container
//! processes, demand-paged memory with overcommitment, the out-of-memory
//! killer, and a prefork web-server workload driven by a request
//! generator.

mod engine;
mod prefork;
mod workload;
mod world;

pub use engine::{
    run_scenario, ActionLogRecord, Engine, RequestOutcome, RunArtifacts, SeriesRow, SummaryReport,
    TraceEvent,
};
pub use prefork::{PendingRequest, PreforkConfig, PreforkState, Worker, WorkerBinding};
pub use workload::{GaussianTimer, WorkloadSpec};
pub use world::{
    oom_badness, Container, Node, ProcessRole, ProcessSpec, SimProcess, TouchResult, World,
};

use thiserror::Error;

/// Simulated time in milliseconds.
pub type SimMs = u64;
pub type Pid = u64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("badness score requested for immune process {pid}")]
    ImmuneProcess { pid: Pid },
    #[error("out-of-memory on {node}: every process is immune or protected by guarantee")]
    NoKillableProcess { node: String },
    #[error("accounting error: {0}")]
    Accounting(#[from] crate::ubc::UbcError),
    #[error("invariant violated at {at_ms} ms: {message}")]
    InvariantViolation { at_ms: SimMs, message: String },
    #[error("scenario error: {0}")]
    Scenario(String),
}
