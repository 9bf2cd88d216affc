//! Synthetic drift episodes.
//!
//! An episode is a stream of API snapshots. Each configured endpoint carries a
//! version counter, a small parameter map and a free-text note. A drift event
//! bumps one endpoint's version and regenerates its parameters and note; the
//! step that emits it is critical. Every other step re-emits some endpoint's
//! current snapshot, or (in redundancy regimes) repeats the previous step
//! verbatim.
//!
//! Per-step draw order, all from one [`StreamRng`] seeded by `config.seed`:
//!
//! 1. `uniform` against `drift_prob_at(t)`; on drift, `index(api_pool)` then
//!    the regenerated params and note.
//! 2. Otherwise, in redundancy regimes and for `t > 0`, `uniform` against
//!    `redundancy_prob`.
//! 3. Otherwise `index(api_pool)` for the endpoint to re-emit.
//! 4. Finally one `uniform` for the priority jitter.

mod frozen;

pub use frozen::{
    freeze_episodes, load_episodes, write_episodes, EpisodeFileError, FORMAT_VERSION,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rng::StreamRng;

/// Utility of a critical step.
pub const CRITICAL_UTILITY: f64 = 1.0;
/// Utility of every other step.
pub const BACKGROUND_UTILITY: f64 = 0.01;

const PARAM_KEYS: &[&str] = &[
    "region",
    "limit",
    "format",
    "timeout",
    "page_size",
    "auth_mode",
    "retry",
    "cursor",
    "locale",
    "sort",
];
const PARAMS_PER_SNAPSHOT: usize = 4;
const NOTE_WORDS: &[&str] = &[
    "endpoint",
    "returns",
    "paginated",
    "results",
    "deprecated",
    "field",
    "removed",
    "renamed",
    "default",
    "changed",
    "rate",
    "limit",
    "applies",
    "per",
    "token",
    "schema",
    "response",
    "request",
    "header",
    "required",
    "optional",
    "legacy",
    "clients",
    "should",
    "migrate",
];
/// Notes are built word by word until they reach this many characters.
const NOTE_MIN_CHARS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Default,
    BurstDrift,
    Redundancy,
    BurstRedundancy,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::Default,
        Regime::BurstDrift,
        Regime::Redundancy,
        Regime::BurstRedundancy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Default => "default",
            Regime::BurstDrift => "burst_drift",
            Regime::Redundancy => "redundancy",
            Regime::BurstRedundancy => "burst_redundancy",
        }
    }

    pub fn has_bursts(self) -> bool {
        matches!(self, Regime::BurstDrift | Regime::BurstRedundancy)
    }

    pub fn has_redundancy(self) -> bool {
        matches!(self, Regime::Redundancy | Regime::BurstRedundancy)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error(
    "unknown regime `{0}` (expected one of default, burst_drift, redundancy, burst_redundancy)"
)]
pub struct UnknownRegime(pub String);

impl FromStr for Regime {
    type Err = UnknownRegime;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| UnknownRegime(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{name} = {value} is outside [0, 1]")]
    Probability { name: &'static str, value: f64 },
    #[error("api_pool must be at least 1")]
    EmptyApiPool,
    #[error("burst_len ({len}) exceeds burst_interval ({interval})")]
    BurstWindow { len: usize, interval: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub api_pool: usize,
    pub drift_prob: f64,
    pub burst_interval: usize,
    pub burst_len: usize,
    pub burst_drift_prob: f64,
    pub redundancy_prob: f64,
    pub regime: Regime,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_steps: 200,
            api_pool: 8,
            drift_prob: 0.08,
            burst_interval: 50,
            burst_len: 8,
            burst_drift_prob: 0.6,
            redundancy_prob: 0.7,
            regime: Regime::Default,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = regime;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, value) in [
            ("drift_prob", self.drift_prob),
            ("burst_drift_prob", self.burst_drift_prob),
            ("redundancy_prob", self.redundancy_prob),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ConfigError::Probability { name, value });
            }
        }
        if self.api_pool == 0 {
            return Err(ConfigError::EmptyApiPool);
        }
        if self.burst_len > self.burst_interval {
            return Err(ConfigError::BurstWindow {
                len: self.burst_len,
                interval: self.burst_interval,
            });
        }
        Ok(())
    }

    pub fn in_burst_window(&self, t: usize) -> bool {
        self.regime.has_bursts()
            && self.burst_interval > 0
            && t % self.burst_interval < self.burst_len
    }
}

/// Drift probability in effect at step `t`.
pub fn drift_prob_at(config: &GeneratorConfig, t: usize) -> f64 {
    if config.in_burst_window(t) {
        config.burst_drift_prob
    } else {
        config.drift_prob
    }
}

/// One API snapshot. Empty fields are omitted from the serialized form.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub api: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub version: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

/// Names of the top-level fields that take part in diffs (everything but `api`).
pub const DIFF_FIELDS: [&str; 3] = ["version", "params", "note"];

impl Observation {
    /// The observation's diffable fields as a flat map. `params` is one atomic
    /// value.
    pub fn diff_fields(&self) -> BTreeMap<String, Value> {
        let params: serde_json::Map<String, Value> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        BTreeMap::from([
            ("version".to_string(), Value::String(self.version.clone())),
            ("params".to_string(), Value::Object(params)),
            ("note".to_string(), Value::String(self.note.clone())),
        ])
    }
}

/// Step metadata: a flat key/value map. Episodes only ever store `regime`;
/// the privileged track adds `priority` when building a policy view.
pub type Metadata = BTreeMap<String, Value>;

pub const META_REGIME: &str = "regime";
pub const META_PRIORITY: &str = "priority";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: usize,
    pub observation: Observation,
    #[serde(default)]
    pub metadata: Metadata,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub critical_steps: BTreeSet<usize>,
    pub total_drift_events: usize,
    pub utility: Vec<f64>,
    pub priority: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub config: GeneratorConfig,
    pub steps: Vec<Step>,
    pub labels: Labels,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

struct ApiState {
    name: String,
    version: u64,
    params: BTreeMap<String, String>,
    note: String,
}

impl ApiState {
    fn snapshot(&self) -> Observation {
        Observation {
            api: self.name.clone(),
            version: format!("v{}", self.version),
            params: self.params.clone(),
            note: self.note.clone(),
        }
    }
}

fn random_params(rng: &mut StreamRng) -> BTreeMap<String, String> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut keys: Vec<&str> = PARAM_KEYS.to_vec();
    let mut params = BTreeMap::new();
    for _ in 0..PARAMS_PER_SNAPSHOT {
        let key = keys.remove(rng.index(keys.len()));
        let len = 2 + rng.index(5);
        let value: String = (0..len)
            .map(|_| ALPHABET[rng.index(ALPHABET.len())] as char)
            .collect();
        params.insert(key.to_string(), value);
    }
    params
}

fn random_note(rng: &mut StreamRng) -> String {
    let mut note = String::new();
    while note.len() < NOTE_MIN_CHARS {
        if !note.is_empty() {
            note.push(' ');
        }
        note.push_str(NOTE_WORDS[rng.index(NOTE_WORDS.len())]);
    }
    note
}

/// Generate one episode. A pure function of `config`.
pub fn generate_episode(config: &GeneratorConfig) -> Result<Episode, ConfigError> {
    config.validate()?;
    let mut rng = StreamRng::new(config.seed);

    let mut apis: Vec<ApiState> = (0..config.api_pool)
        .map(|i| ApiState {
            name: format!("api_{i}"),
            version: 1,
            params: random_params(&mut rng),
            note: random_note(&mut rng),
        })
        .collect();

    let metadata = Metadata::from([(
        META_REGIME.to_string(),
        Value::String(config.regime.as_str().to_string()),
    )]);

    let mut steps: Vec<Step> = Vec::with_capacity(config.num_steps);
    let mut labels = Labels::default();

    for t in 0..config.num_steps {
        let drift = rng.chance(drift_prob_at(config, t));
        let observation = if drift {
            let api = &mut apis[rng.index(config.api_pool)];
            api.version += 1;
            api.params = random_params(&mut rng);
            api.note = random_note(&mut rng);
            labels.critical_steps.insert(t);
            api.snapshot()
        } else if config.regime.has_redundancy() && t > 0 && rng.chance(config.redundancy_prob) {
            steps[t - 1].observation.clone()
        } else {
            apis[rng.index(config.api_pool)].snapshot()
        };

        let jitter = 0.15 * rng.uniform();
        if drift {
            labels.utility.push(CRITICAL_UTILITY);
            labels.priority.push(0.8 + jitter);
        } else {
            labels.utility.push(BACKGROUND_UTILITY);
            labels.priority.push(jitter);
        }

        steps.push(Step {
            t,
            observation,
            metadata: metadata.clone(),
        });
    }
    labels.total_drift_events = labels.critical_steps.len();

    Ok(Episode {
        config: config.clone(),
        steps,
        labels,
    })
}

/// Episodes `0..count` for one regime, episode `i` seeded with `base_seed + i`.
pub fn generate_set(
    base: &GeneratorConfig,
    regime: Regime,
    count: usize,
    base_seed: u64,
) -> Result<Vec<Episode>, ConfigError> {
    (0..count as u64)
        .map(|i| {
            generate_episode(
                &base
                    .clone()
                    .with_regime(regime)
                    .with_seed(base_seed.wrapping_add(i)),
            )
        })
        .collect()
}
