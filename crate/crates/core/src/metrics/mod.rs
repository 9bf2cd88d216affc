//! Scoring of finished runs.

mod oracle;

pub use oracle::{
    knapsack_dp, knapsack_dp_set, knapsack_greedy, knapsack_greedy_set, oracle_write_only,
    OracleError, OracleResult,
};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::episodegen::Episode;
use crate::memstore::{estimate_bytes, MemoryState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub epsilon: f64,
    /// Budgets above this use the greedy oracle instead of the exact DP.
    pub dp_budget_limit: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-9,
            dp_budget_limit: 262_144,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub utilization: f64,
    pub write_density: f64,
    pub expire_rate: f64,
    pub avg_staleness: f64,
    pub drift_coverage: f64,
    pub retained_utility: f64,
    pub utility_per_kb: f64,
    pub oracle_utility: f64,
    pub regret_write_only: f64,
    /// True when `oracle_utility` came from the greedy approximation and the
    /// stream did not fit the budget outright.
    pub oracle_approximate: bool,
    pub bytes_used: u64,
    pub budget_bytes: u64,
    #[serde(rename = "T")]
    pub num_steps: usize,
}

impl EpisodeMetrics {
    /// Names of the metrics that get averaged across episodes, in output order.
    pub const SCALAR_NAMES: [&'static str; 13] = [
        "precision",
        "recall",
        "f1",
        "utilization",
        "write_density",
        "expire_rate",
        "avg_staleness",
        "drift_coverage",
        "retained_utility",
        "utility_per_kb",
        "oracle_utility",
        "regret_write_only",
        "bytes_used",
    ];

    pub fn scalars(&self) -> [f64; 13] {
        [
            self.precision,
            self.recall,
            self.f1,
            self.utilization,
            self.write_density,
            self.expire_rate,
            self.avg_staleness,
            self.drift_coverage,
            self.retained_utility,
            self.utility_per_kb,
            self.oracle_utility,
            self.regret_write_only,
            self.bytes_used as f64,
        ]
    }
}

/// Precision, recall and F1 of `retained` against `relevant`, with `eps` added
/// to every denominator.
pub fn prf1(retained: &BTreeSet<usize>, relevant: &BTreeSet<usize>, eps: f64) -> (f64, f64, f64) {
    let hits = retained.intersection(relevant).count() as f64;
    let precision = hits / (retained.len() as f64 + eps);
    let recall = hits / (relevant.len() as f64 + eps);
    let f1 = 2.0 * precision * recall / (precision + recall + eps);
    (precision, recall, f1)
}

/// Retained utility per kilobyte of memory used; 0 for empty memory.
pub fn utility_per_kb(utility: f64, bytes_used: u64) -> f64 {
    if bytes_used == 0 {
        0.0
    } else {
        utility / (bytes_used as f64 / 1024.0)
    }
}

pub fn regret_write_only(oracle_utility: f64, retained_utility: f64) -> f64 {
    (oracle_utility - retained_utility).max(0.0)
}

/// Sum of `u_t` over the retained timesteps.
pub fn retained_utility(retained: &BTreeSet<usize>, episode: &Episode) -> f64 {
    retained
        .iter()
        .map(|&t| episode.labels.utility.get(t).copied().unwrap_or(0.0))
        .sum()
}

/// Memory-behaviour diagnostics of a finished run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub utilization: f64,
    pub write_density: f64,
    pub expire_rate: f64,
    pub avg_staleness: f64,
    pub drift_coverage: f64,
}

pub fn diagnostics(state: &MemoryState, episode: &Episode, eps: f64) -> Diagnostics {
    let steps = episode.len();
    let retained = state.retained_timesteps();
    let relevant = &episode.labels.critical_steps;

    let utilization = if state.budget_bytes() == 0 {
        0.0
    } else {
        state.bytes_used() as f64 / state.budget_bytes() as f64
    };
    let write_density = if steps == 0 {
        0.0
    } else {
        retained.len() as f64 / steps as f64
    };
    let writes = state.accepted_count("WRITE");
    let expire_rate = if writes == 0 {
        0.0
    } else {
        state.accepted_count("EXPIRE") as f64 / writes as f64
    };
    let avg_staleness = if state.is_empty() {
        0.0
    } else {
        let last = steps.saturating_sub(1);
        let total: usize = state.items().map(|i| last.saturating_sub(i.timestep)).sum();
        total as f64 / state.len() as f64
    };
    let covered = retained.intersection(relevant).count() as f64;
    let drift_coverage = covered / (relevant.len() as f64 + eps);

    Diagnostics {
        utilization,
        write_density,
        expire_rate,
        avg_staleness,
        drift_coverage,
    }
}

/// Byte weights of every step, as the oracle sees them.
pub fn step_weights(episode: &Episode) -> Vec<u64> {
    episode.steps.iter().map(estimate_bytes).collect()
}

/// WRITE-only oracle for `episode` at `budget`.
pub fn episode_oracle(episode: &Episode, budget: u64, cfg: &MetricsConfig) -> OracleResult {
    oracle_write_only(&episode.labels.utility, &step_weights(episode), budget, cfg)
        .expect("episode utilities are non-negative and aligned with steps")
}

/// Score a finished run against a precomputed oracle.
pub fn score_with_oracle(
    state: &MemoryState,
    episode: &Episode,
    oracle: OracleResult,
    cfg: &MetricsConfig,
) -> EpisodeMetrics {
    let retained = state.retained_timesteps();
    let (precision, recall, f1) = prf1(&retained, &episode.labels.critical_steps, cfg.epsilon);
    let diag = diagnostics(state, episode, cfg.epsilon);
    let utility = retained_utility(&retained, episode);
    EpisodeMetrics {
        precision,
        recall,
        f1,
        utilization: diag.utilization,
        write_density: diag.write_density,
        expire_rate: diag.expire_rate,
        avg_staleness: diag.avg_staleness,
        drift_coverage: diag.drift_coverage,
        retained_utility: utility,
        utility_per_kb: utility_per_kb(utility, state.bytes_used()),
        oracle_utility: oracle.utility,
        regret_write_only: regret_write_only(oracle.utility, utility),
        oracle_approximate: oracle.approximate,
        bytes_used: state.bytes_used(),
        budget_bytes: state.budget_bytes(),
        num_steps: episode.len(),
    }
}

pub fn score(state: &MemoryState, episode: &Episode, cfg: &MetricsConfig) -> EpisodeMetrics {
    let oracle = episode_oracle(episode, state.budget_bytes(), cfg);
    score_with_oracle(state, episode, oracle, cfg)
}
