//! Benchmark orchestration: one sequential pass per (episode, policy, budget,
//! track), then aggregation into per-condition means and standard errors.

mod aggregate;

pub use aggregate::{
    aggregate, read_records, write_aggregate_csv, AggregateRow, MetricSummary, ReadRecordsError,
};

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::episodegen::{
    generate_set, ConfigError, Episode, GeneratorConfig, Metadata, Regime, META_PRIORITY,
};
use crate::memstore::MemoryState;
use crate::metrics::{
    episode_oracle, score_with_oracle, EpisodeMetrics, MetricsConfig, OracleResult,
};
use crate::policies::{Policy, PolicyError, PolicyKind, PolicyParams, PolicyView, Track};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

pub const DEFAULT_BUDGETS: [u64; 4] = [1024, 10_240, 102_400, 1_048_576];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("policy {policy} cannot run on the {track} track")]
    TrackMismatch { policy: &'static str, track: Track },
    #[error("policy failed at t={t}: {source}")]
    Policy { t: usize, source: PolicyError },
    #[error("policy panicked at t={t}: {message}")]
    Panic { t: usize, message: String },
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Generator(#[from] ConfigError),
    #[error("output directory {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Metadata the policy is allowed to see on `track`.
pub fn track_metadata(episode: &Episode, t: usize, track: Track) -> Metadata {
    let mut metadata = episode.steps[t].metadata.clone();
    if track == Track::Privileged {
        if let Some(&p) = episode.labels.priority.get(t) {
            metadata.insert(META_PRIORITY.to_string(), serde_json::json!(p));
        }
    }
    metadata
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic payload".to_string())
}

/// Drive `policy` over `episode` once, applying its actions as they come.
pub fn run_policy(
    episode: &Episode,
    policy: &mut dyn Policy,
    budget: u64,
    track: Track,
) -> Result<MemoryState, RunError> {
    if policy.privileged() && track == Track::Unprivileged {
        return Err(RunError::TrackMismatch {
            policy: policy.name(),
            track,
        });
    }
    let mut memory = MemoryState::new(budget);
    for (t, step) in episode.steps.iter().enumerate() {
        let metadata = track_metadata(episode, t, track);
        let view = PolicyView {
            t,
            step,
            metadata: &metadata,
            memory: &memory,
        };
        let actions = panic::catch_unwind(AssertUnwindSafe(|| policy.step(&view)))
            .map_err(|p| RunError::Panic {
                t,
                message: panic_message(p),
            })?
            .map_err(|source| RunError::Policy { t, source })?;
        for action in actions {
            memory.apply_action(step, action);
        }
    }
    Ok(memory)
}

/// Run and score one episode.
pub fn run_episode(
    episode: &Episode,
    policy: &mut dyn Policy,
    budget: u64,
    track: Track,
    cfg: &MetricsConfig,
) -> Result<(MemoryState, EpisodeMetrics), RunError> {
    let oracle = episode_oracle(episode, budget, cfg);
    run_episode_with_oracle(episode, policy, budget, track, oracle, cfg)
}

fn run_episode_with_oracle(
    episode: &Episode,
    policy: &mut dyn Policy,
    budget: u64,
    track: Track,
    oracle: OracleResult,
    cfg: &MetricsConfig,
) -> Result<(MemoryState, EpisodeMetrics), RunError> {
    let memory = run_policy(episode, policy, budget, track)?;
    let metrics = score_with_oracle(&memory, episode, oracle, cfg);
    Ok((memory, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One line of the per-episode results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub regime: Regime,
    pub track: Track,
    pub budget: u64,
    pub policy: PolicyKind,
    pub episode_index: usize,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EpisodeMetrics>,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub regimes: Vec<Regime>,
    pub tracks: Vec<Track>,
    pub budgets: Vec<u64>,
    pub policies: Vec<PolicyKind>,
    pub episodes_per_condition: usize,
    pub base_seed: u64,
    pub generator: GeneratorConfig,
    pub policy_params: PolicyParams,
    pub metrics: MetricsConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            regimes: Regime::ALL.to_vec(),
            tracks: Track::ALL.to_vec(),
            budgets: DEFAULT_BUDGETS.to_vec(),
            policies: PolicyKind::ALL.to_vec(),
            episodes_per_condition: 10,
            base_seed: 0,
            generator: GeneratorConfig::default(),
            policy_params: PolicyParams::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |msg: &str| Err(SweepError::Config(msg.to_string()));
        if self.regimes.is_empty() || self.tracks.is_empty() || self.policies.is_empty() {
            return bad("regimes, tracks and policies must be non-empty");
        }
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return bad("budgets must be non-empty and positive");
        }
        if self.episodes_per_condition == 0 {
            return bad("episodes_per_condition must be at least 1");
        }
        if !self.tracks.contains(&Track::Privileged) {
            if let Some(p) = self.policies.iter().find(|p| p.privileged()) {
                return Err(SweepError::Config(format!(
                    "policy {p} needs the privileged track but only the unprivileged track was requested"
                )));
            }
        }
        self.generator.validate()?;
        Ok(())
    }

    /// (track, policy) pairs that will run, privileged policies only on the
    /// privileged track.
    pub fn schedule(&self) -> Vec<(Track, PolicyKind)> {
        let mut tracks = self.tracks.clone();
        tracks.sort();
        tracks.dedup();
        let mut policies = self.policies.clone();
        policies.sort();
        policies.dedup();
        tracks
            .into_iter()
            .flat_map(|t| {
                policies
                    .iter()
                    .copied()
                    .filter(move |p| p.available_on(t))
                    .map(move |p| (t, p))
            })
            .collect()
    }
}

/// Episodes per regime, indexed by episode number.
pub type EpisodeSet = HashMap<Regime, Vec<Episode>>;

/// Generate `episodes_per_condition` episodes for every configured regime.
pub fn generate_episodes(cfg: &SweepConfig) -> Result<EpisodeSet, SweepError> {
    let mut set = EpisodeSet::new();
    for &regime in &cfg.regimes {
        let eps = generate_set(
            &cfg.generator,
            regime,
            cfg.episodes_per_condition,
            cfg.base_seed,
        )?;
        set.insert(regime, eps);
    }
    Ok(set)
}

/// Group a flat list of frozen episodes by regime, keeping file order.
pub fn group_by_regime(episodes: Vec<Episode>) -> EpisodeSet {
    let mut set = EpisodeSet::new();
    for ep in episodes {
        set.entry(ep.config.regime).or_default().push(ep);
    }
    set
}

/// Execute every run of the sweep. Records come back sorted by
/// (regime, track, budget, policy, episode_index).
pub fn run_sweep_records(
    cfg: &SweepConfig,
    episodes: &EpisodeSet,
) -> Result<Vec<EpisodeRecord>, SweepError> {
    cfg.validate()?;
    let n = cfg.episodes_per_condition;
    let mut regimes = cfg.regimes.clone();
    regimes.sort();
    regimes.dedup();
    let mut budgets = cfg.budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    for regime in &regimes {
        let have = episodes.get(regime).map_or(0, Vec::len);
        if have < n {
            return Err(SweepError::Config(format!(
                "regime {regime} needs {n} episodes, only {have} available"
            )));
        }
    }

    // Oracles depend only on (regime, episode, budget); share them across policies.
    let mut oracle_keys: Vec<(Regime, usize, u64)> = Vec::new();
    for &r in &regimes {
        for i in 0..n {
            oracle_keys.extend(budgets.iter().map(|&b| (r, i, b)));
        }
    }
    let oracles: HashMap<(Regime, usize, u64), OracleResult> = oracle_keys
        .par_iter()
        .map(|&(r, i, b)| ((r, i, b), episode_oracle(&episodes[&r][i], b, &cfg.metrics)))
        .collect();

    let schedule = cfg.schedule();
    let mut jobs = Vec::new();
    for &regime in &regimes {
        for &(track, policy) in &schedule {
            for &budget in &budgets {
                for i in 0..n {
                    jobs.push((regime, track, budget, policy, i));
                }
            }
        }
    }
    jobs.sort();

    let records = jobs
        .par_iter()
        .map(|&(regime, track, budget, policy, i)| {
            let episode = &episodes[&regime][i];
            let mut instance = policy.build(&cfg.policy_params);
            let oracle = oracles[&(regime, i, budget)];
            let outcome = run_episode_with_oracle(
                episode,
                instance.as_mut(),
                budget,
                track,
                oracle,
                &cfg.metrics,
            );
            let (status, error, metrics) = match outcome {
                Ok((_, m)) => (RunStatus::Ok, None, Some(m)),
                Err(e) => (RunStatus::Failed, Some(e.to_string()), None),
            };
            EpisodeRecord {
                regime,
                track,
                budget,
                policy,
                episode_index: i,
                seed: episode.config.seed,
                status,
                error,
                metrics,
            }
        })
        .collect();
    Ok(records)
}

pub fn write_records<W: Write>(records: &[EpisodeRecord], mut out: W) -> io::Result<()> {
    for r in records {
        writeln!(
            out,
            "{}",
            canonical::to_string(r).map_err(io::Error::other)?
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub results_path: PathBuf,
    pub aggregate_path: PathBuf,
    pub runs: usize,
    pub failures: usize,
}

/// Run the sweep and write `results.jsonl` and `aggregate.csv` into `out_dir`.
pub fn run_sweep(
    cfg: &SweepConfig,
    episodes: &EpisodeSet,
    out_dir: &Path,
) -> Result<SweepOutput, SweepError> {
    cfg.validate()?;
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SweepError::Output { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let records = run_sweep_records(cfg, episodes)?;

    let results_path = out_dir.join(RESULTS_FILE);
    let mut buf = Vec::new();
    write_records(&records, &mut buf).map_err(io_err(&results_path))?;
    fs::write(&results_path, buf).map_err(io_err(&results_path))?;

    let aggregate_path = out_dir.join(AGGREGATE_FILE);
    let rows = aggregate(&records);
    let mut buf = Vec::new();
    write_aggregate_csv(&rows, &mut buf).map_err(io_err(&aggregate_path))?;
    fs::write(&aggregate_path, buf).map_err(io_err(&aggregate_path))?;

    Ok(SweepOutput {
        results_path,
        aggregate_path,
        runs: records.len(),
        failures: records
            .iter()
            .filter(|r| r.status == RunStatus::Failed)
            .count(),
    })
}
