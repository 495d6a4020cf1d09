//! Deterministic simulator and policy engine for autonomic memory
//! management of a cluster of hardware nodes hosting OS-level
//! virtualization containers.
//!
//! The crate models beancounter-style resource accounting ([`ubc`]),
//! hardware nodes with demand-paged memory, an out-of-memory killer and a
//! prefork web-server workload ([`simkernel`]), stress detection and
//! resolution policies ([`policy`]), the server-side control loop
//! ([`control`]), the layered configuration database ([`config`]), and the
//! client/server control protocol ([`wire`]). [`scenario`] holds the
//! structured run description the CLI front-end parses scenario files into.

pub mod config;
pub mod control;
pub mod policy;
pub mod scenario;
pub mod simkernel;
pub mod ubc;
pub mod wire;
