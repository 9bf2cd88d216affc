//! Write policies and the reference baselines.
//!
//! A policy sees one step at a time through a [`PolicyView`] and answers with
//! an ordered list of memory actions. Unprivileged baselines only look at the
//! observation, benign metadata and the memory itself; the privileged ones
//! also read the `priority` entry the runner injects into the view metadata.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodegen::{Metadata, Observation, Step, META_PRIORITY};
use crate::memstore::{
    compute_delta, delta_bytes, estimate_bytes, Action, ItemKind, MemoryItem, MemoryState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Unprivileged,
    Privileged,
}

impl Track {
    pub const ALL: [Track; 2] = [Track::Unprivileged, Track::Privileged];

    pub fn as_str(self) -> &'static str {
        match self {
            Track::Unprivileged => "unprivileged",
            Track::Privileged => "privileged",
        }
    }
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown track `{0}` (expected unprivileged or privileged)")]
pub struct UnknownTrack(pub String);

impl FromStr for Track {
    type Err = UnknownTrack;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Track::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownTrack(s.to_string()))
    }
}

/// What a policy may see at step `t`.
#[derive(Debug, Clone, Copy)]
pub struct PolicyView<'a> {
    pub t: usize,
    /// The step as it would be stored by a WRITE.
    pub step: &'a Step,
    /// Track-visible metadata. Carries `priority` only on the privileged track.
    pub metadata: &'a Metadata,
    pub memory: &'a MemoryState,
}

impl<'a> PolicyView<'a> {
    pub fn observation(&self) -> &'a Observation {
        &self.step.observation
    }

    pub fn priority(&self) -> Option<f64> {
        self.metadata
            .get(META_PRIORITY)
            .and_then(serde_json::Value::as_f64)
    }

    pub fn fits(&self, cost: u64) -> bool {
        cost <= self.memory.remaining_bytes()
    }

    fn write(&self) -> Action {
        Action::Write {
            step: self.step.clone(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("{policy} needs the priority signal, which this view does not carry")]
    MissingPriority { policy: &'static str },
}

pub trait Policy: Send {
    fn name(&self) -> &'static str;

    fn privileged(&self) -> bool {
        false
    }

    fn step(&mut self, view: &PolicyView<'_>) -> Result<Vec<Action>, PolicyError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// Sampling stride for `uniform_sample`.
    pub stride: usize,
    /// Priority threshold for `priority_threshold`.
    pub tau: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            stride: 10,
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    NoMem,
    FifoStoreAll,
    LastKb,
    UniformSample,
    MergeAggressive,
    PriorityThreshold,
    PriorityGreedy,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::NoMem,
        PolicyKind::FifoStoreAll,
        PolicyKind::LastKb,
        PolicyKind::UniformSample,
        PolicyKind::MergeAggressive,
        PolicyKind::PriorityThreshold,
        PolicyKind::PriorityGreedy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::NoMem => "no_mem",
            PolicyKind::FifoStoreAll => "fifo_store_all",
            PolicyKind::LastKb => "last_kb",
            PolicyKind::UniformSample => "uniform_sample",
            PolicyKind::MergeAggressive => "merge_aggressive",
            PolicyKind::PriorityThreshold => "priority_threshold",
            PolicyKind::PriorityGreedy => "priority_greedy",
        }
    }

    pub fn privileged(self) -> bool {
        matches!(
            self,
            PolicyKind::PriorityThreshold | PolicyKind::PriorityGreedy
        )
    }

    pub fn available_on(self, track: Track) -> bool {
        track == Track::Privileged || !self.privileged()
    }

    /// A fresh instance, bound to a single episode run.
    pub fn build(self, params: &PolicyParams) -> Box<dyn Policy> {
        match self {
            PolicyKind::NoMem => Box::new(NoMem),
            PolicyKind::FifoStoreAll => Box::new(FifoStoreAll),
            PolicyKind::LastKb => Box::new(LastKb),
            PolicyKind::UniformSample => Box::new(UniformSample {
                stride: params.stride.max(1),
            }),
            PolicyKind::MergeAggressive => Box::new(MergeAggressive),
            PolicyKind::PriorityThreshold => Box::new(PriorityThreshold { tau: params.tau }),
            PolicyKind::PriorityGreedy => Box::new(PriorityGreedy::default()),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown policy `{0}`")]
pub struct UnknownPolicy(pub String);

impl FromStr for PolicyKind {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| UnknownPolicy(s.to_string()))
    }
}

/// Oldest first: by timestep, then item id.
fn age_order(a: &&MemoryItem, b: &&MemoryItem) -> std::cmp::Ordering {
    (a.timestep, a.item_id).cmp(&(b.timestep, b.item_id))
}

pub struct NoMem;

impl Policy for NoMem {
    fn name(&self) -> &'static str {
        "no_mem"
    }

    fn step(&mut self, _view: &PolicyView<'_>) -> Result<Vec<Action>, PolicyError> {
        Ok(vec![Action::Skip])
    }
}

/// Write while the budget lasts, never evict.
pub struct FifoStoreAll;

impl Policy for FifoStoreAll {
    fn name(&self) -> &'static str {
        "fifo_store_all"
    }

    fn step(&mut self, view: &PolicyView<'_>) -> Result<Vec<Action>, PolicyError> {
        if view.fits(estimate_bytes(view.step)) {
            Ok(vec![view.write()])
        } else {
            Ok(vec![Action::Skip])
        }
    }
}

/// Sliding window over the most recent bytes.
pub struct LastKb;

impl LastKb {
    fn plan(view: &PolicyView<'_>) -> Vec<Action> {
        let cost = estimate_bytes(view.step);
        if cost > view.memory.budget_bytes() {
            return vec![Action::Skip];
        }
        let mut free = view.memory.remaining_bytes();
        let mut actions = Vec::new();
        if cost > free {
            let mut oldest: Vec<&MemoryItem> = view
                .memory
                .items()
                .filter(|i| i.timestep < view.t)
                .collect();
            oldest.sort_by(age_order);
            for item in oldest {
                if cost <= free {
                    break;
                }
                actions.push(Action::Expire {
                    target: item.item_id,
                });
                free += item.charged_bytes;
            }
        }
        if cost <= free {
            actions.push(view.write());
        } else {
            // Only items from the current step remain; nothing to gain.
            actions = vec![Action::Skip];
        }
        actions
    }
}

impl Policy for LastKb {
    fn name(&self) -> &'static str {
        "last_kb"
    }

    fn step(&mut self, view: &PolicyView<'_>) -> Result<Vec<Action>, PolicyError> {
        Ok(Self::plan(view))
    }
}

/// Every `stride`-th step, starting at t = 0.
pub struct UniformSample {
    pub stride: usize,
}

impl Policy for UniformSample {
    fn name(&self) -> &'static str {
        "uniform_sample"
    }

    fn step(&mut self, view: &PolicyView<'_>) -> Result<Vec<Action>, PolicyError> {
        if view.t.is_multiple_of(self.stride) && view.fits(estimate_bytes(view.step)) {
            Ok(vec![view.write()])
        } else {
            Ok(vec![Action::Skip])
        }
    }
}

/// Store only deltas against the latest WRITE of the same endpoint; falls back
/// to [`LastKb`] when there is no such base or the delta does not fit.
pub struct MergeAggressive;

impl Policy for MergeAggressive {
    fn name(&self) -> &'static str {
        "merge_aggressive"
    }

    fn step(&mut self, view: &PolicyView<'_>) -> Result<Vec<Action>, PolicyError> {
        let obs = view.observation();
        let base = view
            .memory
            .items()
            .filter(|i| i.kind == ItemKind::Write && i.api == obs.api)
            .max_by_key(|i| (i.timestep, i.item_id));
        let Some(base) = base else {
            return Ok(LastKb::plan(view));
        };
        let effective = view
            .memory
            .effective_observation(base.item_id)
            .expect("live WRITE item");
        let delta = compute_delta(&effective, obs).expect("same api by construction");
        if delta.is_empty() {
            return Ok(vec![Action::Skip]);
        }
        if view.fits(delta_bytes(&delta)) {
            Ok(vec![Action::Merge {
                target: base.item_id,
                delta,
            }])
        } else {
            Ok(LastKb::plan(view))
        }
    }
}

/// Write steps whose priority exceeds `tau`; never evicts.
pub struct PriorityThreshold {
    pub tau: f64,
}

impl Policy for PriorityThreshold {
    fn name(&self) -> &'static str {
        "priority_threshold"
    }

    fn privileged(&self) -> bool {
        true
    }

    fn step(&mut self, view: &PolicyView<'_>) -> Result<Vec<Action>, PolicyError> {
        let p = view.priority().ok_or(PolicyError::MissingPriority {
            policy: "priority_threshold",
        })?;
        if p > self.tau && view.fits(estimate_bytes(view.step)) {
            Ok(vec![view.write()])
        } else {
            Ok(vec![Action::Skip])
        }
    }
}

/// Keep the highest-priority steps, evicting the lowest-priority (then oldest)
/// item while the incoming step outranks it.
#[derive(Default)]
pub struct PriorityGreedy {
    /// Priority observed for each timestep this policy wrote.
    recorded: BTreeMap<usize, f64>,
}

impl PriorityGreedy {
    fn recorded_priority(&self, item: &MemoryItem) -> f64 {
        self.recorded.get(&item.timestep).copied().unwrap_or(0.0)
    }
}

impl Policy for PriorityGreedy {
    fn name(&self) -> &'static str {
        "priority_greedy"
    }

    fn privileged(&self) -> bool {
        true
    }

    fn step(&mut self, view: &PolicyView<'_>) -> Result<Vec<Action>, PolicyError> {
        let p = view.priority().ok_or(PolicyError::MissingPriority {
            policy: "priority_greedy",
        })?;
        let cost = estimate_bytes(view.step);
        if cost > view.memory.budget_bytes() {
            return Ok(vec![Action::Skip]);
        }

        let mut candidates: Vec<(f64, &MemoryItem)> = view
            .memory
            .items()
            .filter(|i| i.timestep < view.t)
            .map(|i| (self.recorded_priority(i), i))
            .collect();
        candidates.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| (a.1.timestep, a.1.item_id).cmp(&(b.1.timestep, b.1.item_id)))
        });

        let mut free = view.memory.remaining_bytes();
        let mut actions = Vec::new();
        let mut victims = candidates.into_iter();
        while cost > free {
            match victims.next() {
                Some((victim_priority, item)) if victim_priority < p => {
                    actions.push(Action::Expire {
                        target: item.item_id,
                    });
                    free += item.charged_bytes;
                }
                // Evicting part of the way to a write that cannot happen only
                // loses memory.
                _ => return Ok(vec![Action::Skip]),
            }
        }
        actions.push(view.write());
        self.recorded.insert(view.t, p);
        Ok(actions)
    }
}
