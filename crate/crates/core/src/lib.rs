//! Deterministic benchmark harness for memory write policies under a byte
//! budget.
//!
//! - [`episodegen`]: seeded synthetic drift episodes and the frozen file format.
//! - [`memstore`]: the budgeted memory and its WRITE / MERGE / EXPIRE / SKIP
//!   semantics.
//! - [`policies`]: the policy interface and reference baselines.
//! - [`metrics`]: task-quality and memory diagnostics, plus the WRITE-only
//!   knapsack oracle.
//! - [`runner`]: sweeps over regimes, tracks, budgets and policies.

pub mod canonical;
pub mod episodegen;
pub mod memstore;
pub mod metrics;
pub mod policies;
pub mod rng;
pub mod runner;
pub mod selftest;
