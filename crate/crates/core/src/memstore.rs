//! Budgeted external memory.
//!
//! Items are charged when inserted and credited with exactly the same amount
//! when expired. Full-step WRITE items cost the canonical envelope length plus
//! a 32-byte header and a 16-byte index entry; MERGE deltas cost their
//! canonical length plus the 16-byte index entry only. Every call to
//! [`MemoryState::apply_action`] appends one [`ActionRecord`] to the log,
//! whether the action was accepted or not, and a rejected action never touches
//! the items or the byte counter.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical;
use crate::episodegen::{Metadata, Observation, Step, DIFF_FIELDS};

pub const ITEM_HEADER_BYTES: u64 = 32;
pub const INDEX_ENTRY_BYTES: u64 = 16;
pub const WRITE_OVERHEAD_BYTES: u64 = ITEM_HEADER_BYTES + INDEX_ENTRY_BYTES;

pub type ItemId = u64;

/// Flat field diff: top-level observation field name to its new value.
pub type Delta = BTreeMap<String, Value>;

#[derive(Serialize)]
struct Envelope<'a> {
    m: &'a Metadata,
    x: &'a Observation,
}

/// Byte cost of storing `step` as a WRITE item.
pub fn estimate_bytes(step: &Step) -> u64 {
    let envelope = Envelope {
        m: &step.metadata,
        x: &step.observation,
    };
    let len = canonical::byte_len(&envelope).expect("observation envelopes always serialize");
    len as u64 + WRITE_OVERHEAD_BYTES
}

/// Byte cost of storing `delta` as a MERGE item.
pub fn delta_bytes(delta: &Delta) -> u64 {
    canonical::byte_len(delta).expect("deltas always serialize") as u64 + INDEX_ENTRY_BYTES
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cannot diff observations of different endpoints ({effective} vs {incoming})")]
pub struct ApiMismatch {
    pub effective: String,
    pub incoming: String,
}

/// Shallow diff of `incoming` against `effective`, excluding `api`. Values are
/// taken from `incoming`; `params` is compared and emitted as a whole.
pub fn compute_delta(
    effective: &Observation,
    incoming: &Observation,
) -> Result<Delta, ApiMismatch> {
    if effective.api != incoming.api {
        return Err(ApiMismatch {
            effective: effective.api.clone(),
            incoming: incoming.api.clone(),
        });
    }
    let before = effective.diff_fields();
    Ok(incoming
        .diff_fields()
        .into_iter()
        .filter(|(k, v)| before.get(k) != Some(v))
        .collect())
}

/// Overlay `delta` onto `obs`. Unknown or ill-typed fields are ignored; the
/// store only ever applies deltas it has validated as canonical.
pub fn apply_delta(obs: &mut Observation, delta: &Delta) {
    for field in DIFF_FIELDS {
        let Some(value) = delta.get(field) else {
            continue;
        };
        match (field, value) {
            ("version", Value::String(s)) => obs.version = s.clone(),
            ("note", Value::String(s)) => obs.note = s.clone(),
            ("params", Value::Object(map)) => {
                obs.params = map
                    .iter()
                    .filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
                    .collect();
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ItemKind {
    Write,
    Merge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Step(Step),
    Delta(Delta),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub item_id: ItemId,
    pub kind: ItemKind,
    pub timestep: usize,
    pub api: String,
    pub payload: Payload,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_id: Option<ItemId>,
    pub charged_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Write { step: Step },
    Merge { target: ItemId, delta: Delta },
    Expire { target: ItemId },
    Skip,
}

impl Action {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Action::Write { .. } => "WRITE",
            Action::Merge { .. } => "MERGE",
            Action::Expire { .. } => "EXPIRE",
            Action::Skip => "SKIP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    OverBudget,
    ExpireTooYoung,
    MergeBadBase,
    MergeApiMismatch,
    MergeNoncanonicalDelta,
    MergeEmptyDelta,
    MissingTarget,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::OverBudget => "over_budget",
            RejectReason::ExpireTooYoung => "expire_too_young",
            RejectReason::MergeBadBase => "merge_bad_base",
            RejectReason::MergeApiMismatch => "merge_api_mismatch",
            RejectReason::MergeNoncanonicalDelta => "merge_noncanonical_delta",
            RejectReason::MergeEmptyDelta => "merge_empty_delta",
            RejectReason::MissingTarget => "missing_target",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    Rejected(RejectReason),
}

impl Outcome {
    pub fn is_accepted(self) -> bool {
        matches!(self, Outcome::Accepted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub t: usize,
    pub action: Action,
    pub outcome: Outcome,
    pub bytes_delta: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    budget_bytes: u64,
    bytes_used: u64,
    items: BTreeMap<ItemId, MemoryItem>,
    log: Vec<ActionRecord>,
    next_id: ItemId,
}

impl MemoryState {
    pub fn new(budget_bytes: u64) -> Self {
        Self {
            budget_bytes,
            bytes_used: 0,
            items: BTreeMap::new(),
            log: Vec::new(),
            next_id: 0,
        }
    }

    pub fn budget_bytes(&self) -> u64 {
        self.budget_bytes
    }

    pub fn bytes_used(&self) -> u64 {
        self.bytes_used
    }

    pub fn remaining_bytes(&self) -> u64 {
        self.budget_bytes - self.bytes_used
    }

    /// Live items in insertion order.
    pub fn items(&self) -> impl Iterator<Item = &MemoryItem> + '_ {
        self.items.values()
    }

    pub fn item(&self, id: ItemId) -> Option<&MemoryItem> {
        self.items.get(&id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn log(&self) -> &[ActionRecord] {
        &self.log
    }

    /// Observation of WRITE item `id` with its live deltas applied in insertion
    /// order. `None` unless `id` is a live WRITE item.
    pub fn effective_observation(&self, id: ItemId) -> Option<Observation> {
        let base = self.items.get(&id)?;
        let Payload::Step(step) = &base.payload else {
            return None;
        };
        let mut obs = step.observation.clone();
        for item in self.items.range(id + 1..).map(|(_, i)| i) {
            if item.base_id == Some(id) {
                if let Payload::Delta(delta) = &item.payload {
                    apply_delta(&mut obs, delta);
                }
            }
        }
        Some(obs)
    }

    /// Timesteps represented by live memory: every WRITE item, plus MERGE
    /// items whose base is still live and shares their endpoint.
    pub fn retained_timesteps(&self) -> BTreeSet<usize> {
        self.items
            .values()
            .filter(|item| match item.kind {
                ItemKind::Write => true,
                ItemKind::Merge => item
                    .base_id
                    .and_then(|b| self.items.get(&b))
                    .is_some_and(|base| base.kind == ItemKind::Write && base.api == item.api),
            })
            .map(|item| item.timestep)
            .collect()
    }

    fn check(&self, current: &Step, action: &Action) -> Result<i64, RejectReason> {
        let t = current.t;
        match action {
            Action::Skip => Ok(0),
            Action::Write { step } => {
                let cost = estimate_bytes(step);
                self.fits(cost)?;
                Ok(cost as i64)
            }
            Action::Expire { target } => {
                let item = self.items.get(target).ok_or(RejectReason::MissingTarget)?;
                if item.timestep >= t {
                    return Err(RejectReason::ExpireTooYoung);
                }
                Ok(-(item.charged_bytes as i64))
            }
            Action::Merge { target, delta } => {
                let base = self.items.get(target).ok_or(RejectReason::MissingTarget)?;
                if base.kind != ItemKind::Write {
                    return Err(RejectReason::MergeBadBase);
                }
                if base.api != current.observation.api {
                    return Err(RejectReason::MergeApiMismatch);
                }
                if delta.is_empty() {
                    return Err(RejectReason::MergeEmptyDelta);
                }
                let effective = self
                    .effective_observation(*target)
                    .ok_or(RejectReason::MergeBadBase)?;
                let canonical = compute_delta(&effective, &current.observation)
                    .map_err(|_| RejectReason::MergeApiMismatch)?;
                if *delta != canonical {
                    return Err(RejectReason::MergeNoncanonicalDelta);
                }
                let cost = delta_bytes(delta);
                self.fits(cost)?;
                Ok(cost as i64)
            }
        }
    }

    fn fits(&self, cost: u64) -> Result<(), RejectReason> {
        if self.bytes_used + cost <= self.budget_bytes {
            Ok(())
        } else {
            Err(RejectReason::OverBudget)
        }
    }

    fn insert(&mut self, item: MemoryItem) {
        self.bytes_used += item.charged_bytes;
        self.items.insert(item.item_id, item);
    }

    /// Apply `action` emitted while processing `current`. MERGE deltas are
    /// validated against `current.observation`.
    pub fn apply_action(&mut self, current: &Step, action: Action) -> &ActionRecord {
        let t = current.t;
        let outcome = match self.check(current, &action) {
            Err(reason) => {
                self.log.push(ActionRecord {
                    t,
                    action,
                    outcome: Outcome::Rejected(reason),
                    bytes_delta: 0,
                });
                return self.log.last().expect("just pushed");
            }
            Ok(bytes_delta) => (Outcome::Accepted, bytes_delta),
        };

        match &action {
            Action::Skip => {}
            Action::Write { step } => {
                let id = self.next_id;
                self.next_id += 1;
                self.insert(MemoryItem {
                    item_id: id,
                    kind: ItemKind::Write,
                    timestep: step.t,
                    api: step.observation.api.clone(),
                    payload: Payload::Step(step.clone()),
                    base_id: None,
                    charged_bytes: outcome.1 as u64,
                });
            }
            Action::Merge { target, delta } => {
                let id = self.next_id;
                self.next_id += 1;
                self.insert(MemoryItem {
                    item_id: id,
                    kind: ItemKind::Merge,
                    timestep: t,
                    api: current.observation.api.clone(),
                    payload: Payload::Delta(delta.clone()),
                    base_id: Some(*target),
                    charged_bytes: outcome.1 as u64,
                });
            }
            Action::Expire { target } => {
                let item = self.items.remove(target).expect("validated above");
                self.bytes_used -= item.charged_bytes;
            }
        }

        self.log.push(ActionRecord {
            t,
            action,
            outcome: outcome.0,
            bytes_delta: outcome.1,
        });
        self.log.last().expect("just pushed")
    }

    /// Number of accepted log records of the given action kind.
    pub fn accepted_count(&self, kind: &str) -> usize {
        self.log
            .iter()
            .filter(|r| r.outcome.is_accepted() && r.action.kind_name() == kind)
            .count()
    }

    /// One canonical-JSON line per action record.
    pub fn write_log_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for record in &self.log {
            let line = canonical::to_string(record).map_err(io::Error::other)?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(api: &str, version: &str) -> Observation {
        Observation {
            api: api.into(),
            version: version.into(),
            params: BTreeMap::from([("limit".into(), "10".into())]),
            note: "n".into(),
        }
    }

    fn step(t: usize, observation: Observation) -> Step {
        Step {
            t,
            observation,
            metadata: Metadata::new(),
        }
    }

    fn minimal(t: usize) -> Step {
        step(
            t,
            Observation {
                api: "a".into(),
                ..Default::default()
            },
        )
    }

    #[test]
    fn estimate_minimal_envelope() {
        assert_eq!(estimate_bytes(&minimal(0)), 72);
        assert_eq!(estimate_bytes(&minimal(0)), estimate_bytes(&minimal(99)));
        assert!(estimate_bytes(&minimal(3)) >= 48 + 13);
    }

    #[test]
    fn estimate_counts_metadata() {
        let mut s = minimal(0);
        s.metadata
            .insert("regime".into(), Value::String("default".into()));
        // {"m":{"regime":"default"},"x":{"api":"a"}}
        assert_eq!(estimate_bytes(&s), 42 + 48);
    }

    #[test]
    fn delta_single_field() {
        let d = compute_delta(&obs("a", "v1"), &obs("a", "v2")).unwrap();
        assert_eq!(
            d,
            Delta::from([("version".into(), Value::String("v2".into()))])
        );
        assert!(compute_delta(&obs("a", "v1"), &obs("a", "v1"))
            .unwrap()
            .is_empty());
        assert!(compute_delta(&obs("a", "v1"), &obs("b", "v1")).is_err());
    }

    #[test]
    fn delta_params_are_atomic() {
        let mut incoming = obs("a", "v2");
        incoming.params.insert("region".into(), "eu".into());
        let d = compute_delta(&obs("a", "v1"), &incoming).unwrap();
        let keys: Vec<&str> = d.keys().map(String::as_str).collect();
        assert_eq!(keys, ["params", "version"]);
        assert_eq!(
            d["params"],
            serde_json::json!({"limit": "10", "region": "eu"})
        );
    }

    #[test]
    fn write_over_budget_rejected() {
        let mut m = MemoryState::new(64);
        let s = minimal(0);
        let rec = m
            .apply_action(&s, Action::Write { step: s.clone() })
            .clone();
        assert_eq!(rec.outcome, Outcome::Rejected(RejectReason::OverBudget));
        assert_eq!(rec.bytes_delta, 0);
        assert_eq!(m.bytes_used(), 0);
        assert!(m.is_empty());
    }

    #[test]
    fn exact_fit_accepted() {
        let mut m = MemoryState::new(72);
        let s = minimal(0);
        assert!(m
            .apply_action(&s, Action::Write { step: s.clone() })
            .outcome
            .is_accepted());
        assert_eq!(m.bytes_used(), 72);
        assert_eq!(m.remaining_bytes(), 0);
    }

    #[test]
    fn expire_same_step_rejected() {
        let mut m = MemoryState::new(1000);
        let s = minimal(5);
        m.apply_action(&s, Action::Write { step: s.clone() });
        let rec = m.apply_action(&s, Action::Expire { target: 0 });
        assert_eq!(rec.outcome, Outcome::Rejected(RejectReason::ExpireTooYoung));
        assert_eq!(m.bytes_used(), 72);
    }

    #[test]
    fn expire_credits_original_cost() {
        let mut m = MemoryState::new(1000);
        let s3 = minimal(3);
        m.apply_action(&s3, Action::Write { step: s3.clone() });
        assert_eq!(m.bytes_used(), 72);
        let rec = m
            .apply_action(&minimal(4), Action::Expire { target: 0 })
            .clone();
        assert_eq!(rec.bytes_delta, -72);
        assert_eq!(m.bytes_used(), 0);
    }

    #[test]
    fn expire_missing_target() {
        let mut m = MemoryState::new(1000);
        let rec = m.apply_action(&minimal(4), Action::Expire { target: 9 });
        assert_eq!(rec.outcome, Outcome::Rejected(RejectReason::MissingTarget));
    }

    fn with_base() -> MemoryState {
        let mut m = MemoryState::new(10_000);
        let s = step(7, obs("a", "v1"));
        m.apply_action(&s, Action::Write { step: s.clone() });
        m
    }

    fn version_delta(v: &str) -> Delta {
        Delta::from([("version".into(), Value::String(v.into()))])
    }

    #[test]
    fn merge_accepted_and_charged() {
        let mut m = with_base();
        let before = m.bytes_used();
        let d = version_delta("v2");
        let rec = m
            .apply_action(
                &step(9, obs("a", "v2")),
                Action::Merge {
                    target: 0,
                    delta: d.clone(),
                },
            )
            .clone();
        assert!(rec.outcome.is_accepted());
        // {"version":"v2"} is 16 bytes
        assert_eq!(rec.bytes_delta, 16 + 16);
        assert_eq!(m.bytes_used(), before + 32);
        assert_eq!(m.retained_timesteps(), BTreeSet::from([7, 9]));
        assert_eq!(m.effective_observation(0).unwrap().version, "v2");
    }

    #[test]
    fn merge_to_merge_rejected() {
        let mut m = with_base();
        m.apply_action(
            &step(9, obs("a", "v2")),
            Action::Merge {
                target: 0,
                delta: version_delta("v2"),
            },
        );
        let rec = m.apply_action(
            &step(10, obs("a", "v3")),
            Action::Merge {
                target: 1,
                delta: version_delta("v3"),
            },
        );
        assert_eq!(rec.outcome, Outcome::Rejected(RejectReason::MergeBadBase));
    }

    #[test]
    fn merge_cross_api_rejected() {
        let mut m = with_base();
        let rec = m.apply_action(
            &step(9, obs("b", "v2")),
            Action::Merge {
                target: 0,
                delta: version_delta("v2"),
            },
        );
        assert_eq!(
            rec.outcome,
            Outcome::Rejected(RejectReason::MergeApiMismatch)
        );
    }

    #[test]
    fn merge_noncanonical_rejected() {
        let mut m = with_base();
        let mut d = version_delta("v2");
        d.insert("note".into(), Value::String("n".into()));
        let rec = m.apply_action(
            &step(9, obs("a", "v2")),
            Action::Merge {
                target: 0,
                delta: d,
            },
        );
        assert_eq!(
            rec.outcome,
            Outcome::Rejected(RejectReason::MergeNoncanonicalDelta)
        );
    }

    #[test]
    fn merge_empty_rejected() {
        let mut m = with_base();
        let rec = m.apply_action(
            &step(9, obs("a", "v1")),
            Action::Merge {
                target: 0,
                delta: Delta::new(),
            },
        );
        assert_eq!(
            rec.outcome,
            Outcome::Rejected(RejectReason::MergeEmptyDelta)
        );
    }

    #[test]
    fn repeated_merge_of_same_change_rejected() {
        let mut m = with_base();
        let s = step(9, obs("a", "v2"));
        assert!(m
            .apply_action(
                &s,
                Action::Merge {
                    target: 0,
                    delta: version_delta("v2")
                }
            )
            .outcome
            .is_accepted());
        let rec = m.apply_action(
            &step(10, obs("a", "v2")),
            Action::Merge {
                target: 0,
                delta: version_delta("v2"),
            },
        );
        assert_eq!(
            rec.outcome,
            Outcome::Rejected(RejectReason::MergeNoncanonicalDelta)
        );
    }

    #[test]
    fn merge_missing_target() {
        let mut m = with_base();
        let rec = m.apply_action(
            &step(9, obs("a", "v2")),
            Action::Merge {
                target: 42,
                delta: version_delta("v2"),
            },
        );
        assert_eq!(rec.outcome, Outcome::Rejected(RejectReason::MissingTarget));
    }

    #[test]
    fn orphan_delta_not_retained() {
        let mut m = with_base();
        m.apply_action(
            &step(9, obs("a", "v2")),
            Action::Merge {
                target: 0,
                delta: version_delta("v2"),
            },
        );
        let before = m.bytes_used();
        assert!(m
            .apply_action(&minimal(10), Action::Expire { target: 0 })
            .outcome
            .is_accepted());
        assert_eq!(m.len(), 1);
        assert_eq!(
            m.bytes_used(),
            before - estimate_bytes(&step(7, obs("a", "v1")))
        );
        assert!(m.retained_timesteps().is_empty());
    }

    #[test]
    fn expire_merge_item() {
        let mut m = with_base();
        m.apply_action(
            &step(9, obs("a", "v2")),
            Action::Merge {
                target: 0,
                delta: version_delta("v2"),
            },
        );
        let rec = m
            .apply_action(&minimal(10), Action::Expire { target: 1 })
            .clone();
        assert_eq!(rec.bytes_delta, -32);
        assert_eq!(m.retained_timesteps(), BTreeSet::from([7]));
        assert_eq!(m.effective_observation(0).unwrap().version, "v1");
    }

    #[test]
    fn empty_memory_retains_nothing() {
        assert!(MemoryState::new(10).retained_timesteps().is_empty());
    }

    #[test]
    fn skip_is_logged() {
        let mut m = MemoryState::new(10);
        let rec = m.apply_action(&minimal(0), Action::Skip).clone();
        assert!(rec.outcome.is_accepted());
        assert_eq!(rec.bytes_delta, 0);
        assert_eq!(m.log().len(), 1);
    }

    #[test]
    fn log_lines_are_canonical() {
        let mut m = MemoryState::new(10);
        m.apply_action(&minimal(0), Action::Skip);
        m.apply_action(&minimal(1), Action::Expire { target: 3 });
        let mut buf = Vec::new();
        m.write_log_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "{\"action\":{\"type\":\"SKIP\"},\"bytes_delta\":0,\"outcome\":{\"status\":\"accepted\"},\"t\":0}\n\
             {\"action\":{\"target\":3,\"type\":\"EXPIRE\"},\"bytes_delta\":0,\"outcome\":{\"reason\":\"missing_target\",\"status\":\"rejected\"},\"t\":1}\n"
        );
    }
}
