use std::collections::BTreeSet;

use proptest::prelude::*;

use memwrite_bench::episodegen::{
    generate_episode, generate_set, Episode, GeneratorConfig, Regime, META_PRIORITY,
};
use memwrite_bench::memstore::{compute_delta, estimate_bytes, Action, ItemKind, MemoryState};
use memwrite_bench::metrics::{
    knapsack_dp, knapsack_dp_set, knapsack_greedy, prf1, score, MetricsConfig,
};
use memwrite_bench::policies::{PolicyKind, PolicyParams, Track};
use memwrite_bench::runner::{run_episode, run_policy, track_metadata};

const EPS: f64 = 1e-9;

fn regime() -> impl Strategy<Value = Regime> {
    prop::sample::select(Regime::ALL.to_vec())
}

fn index_set(max: usize) -> impl Strategy<Value = BTreeSet<usize>> {
    prop::collection::btree_set(0..max, 0..max)
}

fn knapsack_instance(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u64>, u64)> {
    prop::collection::vec((0u32..50, 1u64..60), 0..=max_n).prop_flat_map(|items| {
        let total: u64 = items.iter().map(|(_, w)| w).sum();
        let values = items.iter().map(|&(v, _)| v as f64).collect::<Vec<_>>();
        let weights = items.iter().map(|&(_, w)| w).collect::<Vec<_>>();
        (Just(values), Just(weights), 0..=total + 20)
    })
}

fn enumerate_best(values: &[f64], weights: &[u64], capacity: u64) -> f64 {
    let n = values.len();
    (0u32..1 << n)
        .filter_map(|mask| {
            let chosen = (0..n).filter(|i| mask & (1 << i) != 0);
            let (w, v) = chosen.fold((0u64, 0.0), |(w, v), i| (w + weights[i], v + values[i]));
            (w <= capacity).then_some(v)
        })
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn prf1_swapping_sets_swaps_precision_and_recall(w in index_set(40), r in index_set(40)) {
        let (p, rc, f) = prf1(&w, &r, EPS);
        let (p2, rc2, f2) = prf1(&r, &w, EPS);
        prop_assert_eq!(p, rc2);
        prop_assert_eq!(rc, p2);
        prop_assert!((f - f2).abs() < 1e-12);
    }

    #[test]
    fn f1_is_the_harmonic_mean(w in index_set(40), r in index_set(40)) {
        let (p, rc, f) = prf1(&w, &r, EPS);
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&rc));
        if p + rc > 0.0 {
            let harmonic = 2.0 * p * rc / (p + rc);
            prop_assert!((f - harmonic).abs() < 1e-6, "f1 {} vs {}", f, harmonic);
        } else {
            prop_assert_eq!(f, 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dp_oracle_matches_enumeration((values, weights, cap) in knapsack_instance(12)) {
        let dp = knapsack_dp(&values, &weights, cap);
        prop_assert_eq!(dp, enumerate_best(&values, &weights, cap));
        let set = knapsack_dp_set(&values, &weights, cap);
        prop_assert!(set.iter().map(|&i| weights[i]).sum::<u64>() <= cap);
    }

    #[test]
    fn greedy_never_beats_dp((values, weights, cap) in knapsack_instance(20)) {
        let dp = knapsack_dp(&values, &weights, cap);
        let greedy = knapsack_greedy(&values, &weights, cap);
        prop_assert!(greedy <= dp);
        if weights.iter().sum::<u64>() <= cap {
            prop_assert_eq!(greedy, dp);
        }
    }

    #[test]
    fn oracle_is_monotone_in_budget((values, weights, cap) in knapsack_instance(20), extra in 0u64..200) {
        prop_assert!(knapsack_dp(&values, &weights, cap) <= knapsack_dp(&values, &weights, cap + extra));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), regime in regime()) {
        let cfg = GeneratorConfig::default().with_regime(regime).with_seed(seed);
        prop_assert_eq!(generate_episode(&cfg).unwrap(), generate_episode(&cfg).unwrap());
    }

    #[test]
    fn labels_are_sound(seed in any::<u64>(), regime in regime()) {
        let ep = generate_episode(&GeneratorConfig::default().with_regime(regime).with_seed(seed)).unwrap();
        prop_assert_eq!(ep.steps.len(), ep.config.num_steps);
        prop_assert_eq!(ep.labels.critical_steps.len(), ep.labels.total_drift_events);
        for (t, step) in ep.steps.iter().enumerate() {
            prop_assert_eq!(step.t, t);
            prop_assert!(!step.metadata.contains_key(META_PRIORITY));
            let critical = ep.labels.critical_steps.contains(&t);
            prop_assert_eq!(critical, ep.labels.priority[t] > 0.5);
            prop_assert!((0.0..=1.0).contains(&ep.labels.priority[t]));
        }
    }

    #[test]
    fn drift_coverage_equals_recall(seed in 0u64..1000, budget in 500u64..30_000, policy in prop::sample::select(PolicyKind::ALL.to_vec())) {
        let ep = generate_episode(&GeneratorConfig::default().with_seed(seed)).unwrap();
        let mut p = policy.build(&PolicyParams::default());
        let (_, m) = run_episode(&ep, p.as_mut(), budget, Track::Privileged, &MetricsConfig::default()).unwrap();
        prop_assert_eq!(m.drift_coverage, m.recall);
        prop_assert!(m.regret_write_only >= 0.0);
        prop_assert!(m.bytes_used <= budget);
        for x in [m.precision, m.recall, m.utilization, m.drift_coverage] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}

#[test]
fn burst_windows_drift_more_often() {
    for regime in [Regime::BurstDrift, Regime::BurstRedundancy] {
        let (mut inside, mut inside_n, mut outside, mut outside_n) =
            (0usize, 0usize, 0usize, 0usize);
        for ep in generate_set(&GeneratorConfig::default(), regime, 100, 0).unwrap() {
            for t in 0..ep.len() {
                let drift = ep.labels.critical_steps.contains(&t) as usize;
                if ep.config.in_burst_window(t) {
                    inside += drift;
                    inside_n += 1;
                } else {
                    outside += drift;
                    outside_n += 1;
                }
            }
        }
        let rate_in = inside as f64 / inside_n as f64;
        let rate_out = outside as f64 / outside_n as f64;
        assert!(
            rate_in > rate_out,
            "{regime}: inside {rate_in:.3} vs outside {rate_out:.3}"
        );
    }
}

#[test]
fn default_regime_drift_rate_is_near_configured() {
    let eps = generate_set(&GeneratorConfig::default(), Regime::Default, 100, 0).unwrap();
    let rate = eps
        .iter()
        .map(|e| e.labels.critical_steps.len() as f64 / e.len() as f64)
        .sum::<f64>()
        / eps.len() as f64;
    assert!((rate - 0.08).abs() <= 0.02, "mean |R|/T = {rate:.4}");
}

/// One fuzz step: which action, how to pick its target, whether time advances.
#[derive(Debug, Clone)]
struct Op {
    kind: u8,
    pick: u8,
    advance: bool,
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        (0u8..4, any::<u8>(), any::<bool>()).prop_map(|(kind, pick, advance)| Op {
            kind,
            pick,
            advance,
        }),
        1..120,
    )
}

fn fuzz_episode(seed: u64) -> Episode {
    generate_episode(
        &GeneratorConfig::default()
            .with_regime(Regime::BurstRedundancy)
            .with_seed(seed),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn store_invariants_hold_under_fuzz(seed in 0u64..50, budget in 1u64..6000, ops in ops()) {
        let ep = fuzz_episode(seed);
        let mut state = MemoryState::new(budget);
        let mut t = 0usize;
        let mut calls = 0usize;
        let mut expired_writes = 0usize;
        for op in ops {
            if op.advance && t + 1 < ep.len() {
                t += 1;
            }
            let step = &ep.steps[t];
            let live: Vec<u64> = state.items().map(|i| i.item_id).collect();
            let target = if live.is_empty() || op.pick % 7 == 0 {
                op.pick as u64
            } else {
                live[op.pick as usize % live.len()]
            };
            let action = match op.kind {
                0 => Action::Write { step: step.clone() },
                1 => Action::Merge {
                    target,
                    delta: state
                        .effective_observation(target)
                        .and_then(|eff| compute_delta(&eff, &step.observation).ok())
                        .unwrap_or_default(),
                },
                2 => Action::Expire { target },
                _ => Action::Skip,
            };
            let expiring_write = matches!(action, Action::Expire { .. })
                && state.item(target).is_some_and(|i| i.kind == ItemKind::Write);
            let before = state.clone();
            let record = state.apply_action(step, action).clone();
            calls += 1;

            if record.outcome.is_accepted() {
                expired_writes += expiring_write as usize;
            } else {
                prop_assert_eq!(record.bytes_delta, 0);
                prop_assert!(state.items().eq(before.items()));
                prop_assert_eq!(state.bytes_used(), before.bytes_used());
            }
            prop_assert!(state.bytes_used() <= budget);
            prop_assert_eq!(state.bytes_used(), state.items().map(|i| i.charged_bytes).sum::<u64>());
            for item in state.items() {
                prop_assert!(item.charged_bytes > 0);
                if item.kind == ItemKind::Merge {
                    let base = item.base_id.expect("merge items record a base");
                    if let Some(b) = state.item(base) {
                        prop_assert_eq!(b.kind, ItemKind::Write);
                        prop_assert_eq!(&b.api, &item.api);
                    }
                }
            }
        }
        prop_assert_eq!(state.log().len(), calls);
        let live_writes = state.items().filter(|i| i.kind == ItemKind::Write).count();
        prop_assert_eq!(state.accepted_count("WRITE"), live_writes + expired_writes);
        let ids: Vec<u64> = state.items().map(|i| i.item_id).collect();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn write_then_expire_is_byte_neutral(seed in 0u64..200, t in 0usize..150, gap in 1usize..40) {
        let ep = fuzz_episode(seed);
        let mut state = MemoryState::new(1 << 20);
        state.apply_action(&ep.steps[0], Action::Write { step: ep.steps[0].clone() });
        let before = state.bytes_used();
        let step = &ep.steps[t];
        let rec = state.apply_action(step, Action::Write { step: step.clone() }).clone();
        prop_assert_eq!(rec.bytes_delta as u64, estimate_bytes(step));
        let later = &ep.steps[(t + gap).min(ep.len() - 1)];
        if later.t > t {
            let expired = state.apply_action(later, Action::Expire { target: 1 }).outcome;
            prop_assert!(expired.is_accepted());
            prop_assert_eq!(state.bytes_used(), before);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn policies_are_deterministic(seed in 0u64..500, budget in 256u64..40_000, regime in regime(), policy in prop::sample::select(PolicyKind::ALL.to_vec())) {
        let ep = generate_episode(&GeneratorConfig::default().with_regime(regime).with_seed(seed)).unwrap();
        let run = || {
            let mut p = policy.build(&PolicyParams::default());
            run_policy(&ep, p.as_mut(), budget, Track::Privileged).unwrap()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.log(), b.log());
    }

    #[test]
    fn unprivileged_track_hides_priority(seed in 0u64..500, budget in 256u64..40_000) {
        let ep = generate_episode(&GeneratorConfig::default().with_seed(seed)).unwrap();
        for t in 0..ep.len() {
            prop_assert!(!track_metadata(&ep, t, Track::Unprivileged).contains_key(META_PRIORITY));
        }
        for policy in PolicyKind::ALL.into_iter().filter(|k| !k.privileged()) {
            let mut p = policy.build(&PolicyParams::default());
            let state = run_policy(&ep, p.as_mut(), budget, Track::Unprivileged).unwrap();
            if policy == PolicyKind::NoMem {
                prop_assert_eq!(state.bytes_used(), 0);
                prop_assert!(state.retained_timesteps().is_empty());
            }
            if policy == PolicyKind::FifoStoreAll {
                prop_assert_eq!(state.log().iter().filter(|r| r.action.kind_name() == "EXPIRE").count(), 0);
            }
        }
    }

    #[test]
    fn large_budgets_retain_everything(seed in 0u64..500, regime in regime()) {
        let ep = generate_episode(&GeneratorConfig::default().with_regime(regime).with_seed(seed)).unwrap();
        let budget = ep.steps.iter().map(estimate_bytes).sum::<u64>();
        let all: BTreeSet<usize> = (0..ep.len()).collect();
        for policy in [PolicyKind::FifoStoreAll, PolicyKind::LastKb, PolicyKind::PriorityGreedy] {
            let mut p = policy.build(&PolicyParams::default());
            let state = run_policy(&ep, p.as_mut(), budget, Track::Privileged).unwrap();
            prop_assert_eq!(state.retained_timesteps(), all.clone());
            let m = score(&state, &ep, &MetricsConfig::default());
            prop_assert!(m.regret_write_only < 1e-9);
        }
    }
}
