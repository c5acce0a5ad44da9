//! Consensus-based synchronization of networked oscillators.

pub mod analysis;
pub mod dynamics;
pub mod graph;
pub mod icas;
pub mod integrator;
pub mod nodac;
pub mod report;
pub mod scenario;
pub mod verify;
