//! Simulation, networking and benchmarking around the protocol core.

pub use mmpaxos_core as core;

pub mod bench;
pub mod runtime;
pub mod sim;
