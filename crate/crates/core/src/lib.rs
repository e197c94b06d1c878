//! Deterministic laboratory for the last-level-cache occupancy channel.
//!
//! The crate simulates the full pipeline end to end: a set-associative LLC
//! model ([`llc`]), an occupancy memorygrammer under restricted timers
//! ([`probe`]), seeded synthetic website workloads with robustness-scenario
//! transforms ([`workload`]), a virtual-timeline scheduler that interleaves
//! victim, attacker and masker over one cache ([`engine`]), a from-scratch
//! 1D-CNN classifier with fold protocol and metrics ([`learn`]), and a
//! cache-configuration detector ([`detect`]).
//!
//! Everything is seed-driven: identical seeds give bit-identical traces,
//! models and metrics, independent of parallelism.

pub mod detect;
pub mod engine;
pub mod learn;
pub mod llc;
pub mod probe;
pub mod seed;
pub mod workload;
