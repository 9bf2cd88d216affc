//! Quick invariant suite behind the `selftest` subcommand: metric and
//! budget-accounting regressions at desk scale.

use std::collections::BTreeSet;

use crate::episodegen::{generate_episode, generate_set, GeneratorConfig, Regime};
use crate::memstore::{compute_delta, estimate_bytes, Action, Delta, MemoryState};
use crate::metrics::{knapsack_dp, knapsack_greedy, MetricsConfig};
use crate::policies::{PolicyKind, PolicyParams, Track};
use crate::rng::StreamRng;
use crate::runner::{
    generate_episodes, run_episode, run_sweep_records, write_records, SweepConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: Result<(), String>) -> Check {
    match result {
        Ok(()) => Check {
            name,
            passed: true,
            detail: String::new(),
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("no_mem_is_empty", no_mem_is_empty()),
        check("write_all_saturates", write_all_saturates()),
        check("staleness_and_utilization", staleness_and_utilization()),
        check("budget_fuzz", budget_fuzz(500)),
        check("expire_credit", expire_credit()),
        check("merge_constraints", merge_constraints()),
        check("oracle_vs_enumeration", oracle_vs_enumeration(200)),
        check("deterministic_sweep", deterministic_sweep()),
    ]
}

fn no_mem_is_empty() -> Result<(), String> {
    let cfg = MetricsConfig::default();
    for regime in Regime::ALL {
        let ep = generate_episode(&GeneratorConfig::default().with_regime(regime))
            .map_err(|e| e.to_string())?;
        for budget in [1024, 1_048_576] {
            let mut p = PolicyKind::NoMem.build(&PolicyParams::default());
            let (state, m) = run_episode(&ep, p.as_mut(), budget, Track::Unprivileged, &cfg)
                .map_err(|e| e.to_string())?;
            ensure(
                state.bytes_used() == 0
                    && m.f1 == 0.0
                    && m.write_density == 0.0
                    && m.drift_coverage == 0.0,
                || format!("{regime}/{budget}: {m:?}"),
            )?;
        }
    }
    Ok(())
}

fn write_all_saturates() -> Result<(), String> {
    let ep = generate_episode(&GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let all: BTreeSet<usize> = (0..ep.len()).collect();
    for kind in [
        PolicyKind::FifoStoreAll,
        PolicyKind::LastKb,
        PolicyKind::PriorityGreedy,
    ] {
        let mut p = kind.build(&PolicyParams::default());
        let (state, m) = run_episode(
            &ep,
            p.as_mut(),
            1_048_576,
            Track::Privileged,
            &MetricsConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        ensure(state.retained_timesteps() == all, || {
            format!("{kind} did not keep every step")
        })?;
        ensure((m.recall - 1.0).abs() < 1e-6, || {
            format!("{kind} recall {}", m.recall)
        })?;
    }
    Ok(())
}

fn staleness_and_utilization() -> Result<(), String> {
    let ep = generate_episode(&GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let cfg = MetricsConfig::default();
    let run = |kind: PolicyKind| {
        let mut p = kind.build(&PolicyParams::default());
        run_episode(&ep, p.as_mut(), 10_240, Track::Unprivileged, &cfg).map(|(_, m)| m)
    };
    let fifo = run(PolicyKind::FifoStoreAll).map_err(|e| e.to_string())?;
    let window = run(PolicyKind::LastKb).map_err(|e| e.to_string())?;
    ensure(fifo.expire_rate == 0.0, || "fifo expired something".into())?;
    ensure(fifo.utilization <= 1.0 && fifo.utilization > 0.9, || {
        format!("fifo utilization {}", fifo.utilization)
    })?;
    ensure(window.avg_staleness < fifo.avg_staleness, || {
        format!(
            "staleness last_kb {} vs fifo {}",
            window.avg_staleness, fifo.avg_staleness
        )
    })
}

/// Random action sequences against random budgets; the byte counter must stay
/// within budget and equal the sum over live items after every action.
pub fn budget_fuzz(sequences: usize) -> Result<(), String> {
    let mut rng = StreamRng::new(0xB0D6E7);
    let episodes = generate_set(&GeneratorConfig::default(), Regime::BurstRedundancy, 4, 100)
        .map_err(|e| e.to_string())?;
    for seq in 0..sequences {
        let ep = &episodes[seq % episodes.len()];
        let budget = 1 + rng.index(4096) as u64;
        let mut state = MemoryState::new(budget);
        let len = 1 + rng.index(60);
        for t in 0..len.min(ep.len()) {
            let step = &ep.steps[t];
            for _ in 0..1 + rng.index(3) {
                let live: Vec<u64> = state.items().map(|i| i.item_id).collect();
                let pick = |rng: &mut StreamRng| {
                    if live.is_empty() || rng.index(5) == 0 {
                        rng.index(64) as u64
                    } else {
                        live[rng.index(live.len())]
                    }
                };
                let action = match rng.index(4) {
                    0 => Action::Write { step: step.clone() },
                    1 => {
                        let target = pick(&mut rng);
                        let delta = state
                            .effective_observation(target)
                            .and_then(|eff| compute_delta(&eff, &step.observation).ok())
                            .unwrap_or_default();
                        Action::Merge { target, delta }
                    }
                    2 => Action::Expire {
                        target: pick(&mut rng),
                    },
                    _ => Action::Skip,
                };
                let before = state.clone();
                let accepted = state.apply_action(step, action).outcome.is_accepted();
                let live_sum: u64 = state.items().map(|i| i.charged_bytes).sum();
                ensure(state.bytes_used() <= budget, || {
                    format!("seq {seq}: {} > {budget}", state.bytes_used())
                })?;
                ensure(state.bytes_used() == live_sum, || {
                    format!(
                        "seq {seq}: counter {} vs live {live_sum}",
                        state.bytes_used()
                    )
                })?;
                if !accepted {
                    ensure(
                        state.items().eq(before.items())
                            && state.bytes_used() == before.bytes_used(),
                        || format!("seq {seq}: rejected action mutated memory"),
                    )?;
                }
            }
        }
    }
    Ok(())
}

fn expire_credit() -> Result<(), String> {
    let ep = generate_episode(&GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let mut state = MemoryState::new(100_000);
    state.apply_action(
        &ep.steps[0],
        Action::Write {
            step: ep.steps[0].clone(),
        },
    );
    let before = state.bytes_used();
    state.apply_action(
        &ep.steps[3],
        Action::Write {
            step: ep.steps[3].clone(),
        },
    );
    ensure(
        state.bytes_used() == before + estimate_bytes(&ep.steps[3]),
        || "write charge".into(),
    )?;
    state.apply_action(&ep.steps[4], Action::Expire { target: 1 });
    ensure(state.bytes_used() == before, || "expire credit".into())
}

fn merge_constraints() -> Result<(), String> {
    use crate::memstore::{Outcome, RejectReason};
    let ep = generate_episode(&GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let base = &ep.steps[0];
    let mut state = MemoryState::new(100_000);
    state.apply_action(base, Action::Write { step: base.clone() });

    let mut bumped = ep.steps[1].clone();
    bumped.observation = base.observation.clone();
    bumped.observation.version = "v999".into();
    let delta = compute_delta(&base.observation, &bumped.observation).map_err(|e| e.to_string())?;
    let mut other = bumped.clone();
    other.observation.api = "elsewhere".into();

    let expect = |state: &mut MemoryState, step, action, reason| {
        let got = state.apply_action(step, action).outcome;
        ensure(got == Outcome::Rejected(reason), || {
            format!("expected {reason}, got {got:?}")
        })
    };
    expect(
        &mut state,
        &other,
        Action::Merge {
            target: 0,
            delta: delta.clone(),
        },
        RejectReason::MergeApiMismatch,
    )?;
    expect(
        &mut state,
        &bumped,
        Action::Merge {
            target: 0,
            delta: Delta::new(),
        },
        RejectReason::MergeEmptyDelta,
    )?;
    let mut wrong = delta.clone();
    wrong.insert("note".into(), serde_json::Value::String("forged".into()));
    expect(
        &mut state,
        &bumped,
        Action::Merge {
            target: 0,
            delta: wrong,
        },
        RejectReason::MergeNoncanonicalDelta,
    )?;
    ensure(
        state
            .apply_action(
                &bumped,
                Action::Merge {
                    target: 0,
                    delta: delta.clone(),
                },
            )
            .outcome
            .is_accepted(),
        || "canonical merge rejected".into(),
    )?;
    expect(
        &mut state,
        &bumped,
        Action::Merge { target: 1, delta },
        RejectReason::MergeBadBase,
    )?;

    let mut later = ep.steps[2].clone();
    later.t = 2;
    state.apply_action(&later, Action::Expire { target: 0 });
    ensure(state.retained_timesteps().is_empty(), || {
        "orphan delta counted".into()
    })
}

fn oracle_vs_enumeration(trials: usize) -> Result<(), String> {
    let mut rng = StreamRng::new(42);
    for trial in 0..trials {
        let n = rng.index(13);
        let values: Vec<f64> = (0..n).map(|_| rng.index(20) as f64).collect();
        let weights: Vec<u64> = (0..n).map(|_| 1 + rng.index(30) as u64).collect();
        let cap = rng.index(120) as u64;
        let mut best = 0.0f64;
        for mask in 0u32..(1 << n) {
            let (w, v) = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .fold((0u64, 0.0), |(w, v), i| (w + weights[i], v + values[i]));
            if w <= cap {
                best = best.max(v);
            }
        }
        let dp = knapsack_dp(&values, &weights, cap);
        let greedy = knapsack_greedy(&values, &weights, cap);
        ensure(dp == best && greedy <= dp, || {
            format!("trial {trial}: dp {dp} greedy {greedy} brute {best}")
        })?;
    }
    Ok(())
}

fn deterministic_sweep() -> Result<(), String> {
    let cfg = SweepConfig {
        regimes: vec![Regime::BurstDrift],
        budgets: vec![1024, 10_240],
        episodes_per_condition: 2,
        ..SweepConfig::default()
    };
    let render = || -> Result<Vec<u8>, String> {
        let eps = generate_episodes(&cfg).map_err(|e| e.to_string())?;
        let recs = run_sweep_records(&cfg, &eps).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_records(&recs, &mut buf).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    ensure(render()? == render()?, || {
        "sweep output differs between runs".into()
    })
}
