use std::cell::Cell;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crowdfleet::dp::{bdp_solve, conv_project, convex_int_argmin, plvfa_train, PlvfaConfig, ValueTable};
use crowdfleet::eval::{evaluate, EvalOptions, Policy};
use crowdfleet::fluid::OpsModel;
use crowdfleet::instance::{Fleet, Instance};
use crowdfleet::mdp::{action_space, resignation_from_shares, sample_transition, total_cost, transition_pmf, FleetState};

fn small(p: f64, q: f64, caps: Fleet, horizon: usize) -> Instance {
    let mut inst = Instance::single_zone(20.0, 2.0);
    inst.gw.active_share = 0.5;
    inst.turnover.p_fd = p;
    inst.turnover.p_gw = p;
    inst.turnover.p_od = p;
    inst.turnover.q_gw = q;
    inst.turnover.q_od = q;
    inst.strategic.caps = caps;
    inst.strategic.horizon = horizon;
    inst.strategic.no_firing = false;
    inst.strategic.c_sev = 2.0;
    inst
}

/// Convex sequence from a start value and sorted integer increments (zeros give ties).
fn convex_sequence(start: i64, mut diffs: Vec<i64>) -> Vec<f64> {
    diffs.sort();
    let mut out = vec![start as f64];
    for d in diffs {
        out.push(out.last().unwrap() + d as f64);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn argmin_agrees_with_a_scan(start in -50i64..50, diffs in prop::collection::vec(-20i64..20, 0..60), offset in -30i64..30) {
        let seq = convex_sequence(start, diffs);
        let (lo, hi) = (offset, offset + seq.len() as i64 - 1);
        let calls = Cell::new(0usize);
        let (arg, val) = convex_int_argmin(|x| { calls.set(calls.get() + 1); seq[(x - lo) as usize] }, lo, hi).unwrap();
        let best = seq.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = seq.iter().position(|&v| v == best).unwrap() as i64 + lo;
        prop_assert_eq!(arg, first);
        prop_assert_eq!(val, best);
        let span = (hi - lo).max(1) as f64;
        let bound = 2.0 * (span.ln() / 1.5f64.ln()).ceil() + 3.0;
        prop_assert!(calls.get() as f64 <= bound, "{} calls for span {}", calls.get(), span);
    }
}

proptest! {
    #[test]
    fn conv_project_is_idempotent_and_keeps_the_pair(z in prop::collection::vec(-10.0f64..10.0, 2..20), pick in 0usize..100) {
        let idx = pick % (z.len() - 1);
        let once = conv_project(&z, idx).unwrap();
        let twice = conv_project(&once, idx).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once[idx], z[idx]);
        prop_assert_eq!(once[idx + 1], z[idx + 1]);
        prop_assert!(once[..=idx].iter().all(|&v| v <= z[idx]));
        prop_assert!(once[idx + 1..].iter().all(|&v| v >= z[idx + 1]));
    }

    #[test]
    fn transition_pmf_sums_to_one(p in 0.0f64..=1.0, q in 0.0f64..=1.0, f in 0u32..8, g in 0u32..8, o in 0u32..8) {
        let inst = small(p, q, Fleet { fd: 8, gw: 8, od: 8 }, 2);
        let pmf = transition_pmf(&inst, FleetState::new(f, g, o, 0)).unwrap();
        let total: f64 = pmf.iter().map(|(_, w)| w).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(pmf.iter().all(|(s, w)| *w >= 0.0 && s.n_fd <= f && s.t == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn total_cost_is_convex_in_the_action(demand in 0.0f64..80.0, g in 0u32..30, o in 0u32..30, n in 0u32..10) {
        let mut inst = small(0.1, 0.1, Fleet { fd: 20, gw: 30, od: 30 }, 1);
        inst.demand = crowdfleet::instance::DemandCurve::Constant { total: demand };
        let ops = OpsModel::new(&inst).unwrap();
        let s = FleetState::new(n, g, o, 0);
        let (lo, hi) = action_space(&inst, s);
        let c: Vec<f64> = (lo..=hi).map(|a| total_cost(&ops, s, a).unwrap().total()).collect();
        for w in c.windows(3) {
            prop_assert!(w[2] - 2.0 * w[1] + w[0] >= -1e-9 * w[1].abs().max(1.0));
        }
    }

    #[test]
    fn bdp_values_are_convex_in_fixed_drivers(p in 0.0f64..0.5, q in 0.0f64..0.5, demand in 5.0f64..60.0, gamma in 0.5f64..=1.0) {
        let mut inst = small(p, q, Fleet { fd: 5, gw: 3, od: 3 }, 3);
        inst.demand = crowdfleet::instance::DemandCurve::Constant { total: demand };
        inst.strategic.gamma = gamma;
        let ops = OpsModel::new(&inst).unwrap();
        let table = bdp_solve(&ops).unwrap();
        let scale = table.values.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        for t in 0..=3 {
            for g in 0..=3 {
                for o in 0..=3 {
                    let v: Vec<f64> = (0..=5).map(|f| table.value(FleetState::new(f, g, o, t)).unwrap()).collect();
                    for w in v.windows(3) {
                        prop_assert!(w[2] - 2.0 * w[1] + w[0] >= -1e-6 * scale);
                    }
                }
            }
        }
    }
}

#[test]
fn sampled_frequencies_match_the_pmf() {
    let inst = small(0.3, 0.2, Fleet { fd: 3, gw: 3, od: 3 }, 2);
    let post = FleetState::new(3, 2, 3, 0);
    let r = resignation_from_shares(&inst, None);
    let pmf = transition_pmf(&inst, post).unwrap();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = std::collections::HashMap::new();
    for _ in 0..n {
        *counts.entry(sample_transition(&inst, post, r, &mut rng)).or_insert(0u32) += 1;
    }
    for (s, p) in pmf {
        let freq = counts.get(&s).copied().unwrap_or(0) as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 4.0 * se + 1e-12, "{s:?}: {freq} vs {p}");
    }
}

/// Best cost over every open-loop action sequence; exact when transitions are deterministic.
fn enumerate_policies(ops: &OpsModel, s: FleetState, horizon: usize, gamma: f64) -> f64 {
    let inst = ops.instance();
    let (lo, hi) = action_space(inst, s);
    (lo..=hi)
        .map(|a| {
            let now = total_cost(ops, s, a).unwrap().total();
            if s.t == horizon {
                return now;
            }
            let next = FleetState::new((s.n_fd as i64 + a) as u32, s.n_gw, s.n_od, s.t + 1);
            now + gamma * enumerate_policies(ops, next, horizon, gamma)
        })
        .fold(f64::INFINITY, f64::min)
}

fn deterministic_tiny() -> Instance {
    let mut inst = small(0.0, 0.0, Fleet { fd: 3, gw: 3, od: 3 }, 2);
    inst.demand = crowdfleet::instance::DemandCurve::Geometric { total_at_horizon: 45.0, growth: 1.5 };
    inst.strategic.gamma = 0.9;
    inst
}

#[test]
fn deterministic_bdp_matches_policy_enumeration() {
    let inst = deterministic_tiny();
    let ops = OpsModel::new(&inst).unwrap();
    let table = bdp_solve(&ops).unwrap();
    for f in 0..=3 {
        for g in 0..=3 {
            for o in 0..=3 {
                let s = FleetState::new(f, g, o, 0);
                let want = enumerate_policies(&ops, s, 2, 0.9);
                let got = table.value(s).unwrap();
                assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{s:?}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn plvfa_is_near_optimal_on_a_deterministic_instance() {
    let inst = deterministic_tiny();
    let ops = OpsModel::new(&inst).unwrap();
    let table = bdp_solve(&ops).unwrap();
    let mut cfg = PlvfaConfig::new(500, 3);
    cfg.alpha = 0.5;
    cfg.k_gw = 1;
    cfg.k_od = 1;
    let slopes = plvfa_train(&ops, &cfg).unwrap().table;
    let s0 = FleetState::new(0, 1, 1, 0);
    let got = evaluate(&ops, &Policy::Plvfa(slopes), s0, 1, 0, &EvalOptions::default()).unwrap().report.mean_discounted;
    let best = table.value(s0).unwrap();
    assert!(got <= best * 1.01, "{got} vs {best}");
}

#[test]
fn bdp_policy_achieves_its_own_value_when_deterministic() {
    let inst = deterministic_tiny();
    let ops = OpsModel::new(&inst).unwrap();
    let table = bdp_solve(&ops).unwrap();
    let s0 = FleetState::new(1, 2, 0, 0);
    let v0 = table.value(s0).unwrap();
    let opts = EvalOptions { oracle: Some(v0), ..Default::default() };
    let delta = evaluate(&ops, &Policy::BdpTable(table), s0, 3, 1, &opts).unwrap().report.delta_oracle.unwrap();
    assert!(delta.abs() < 1e-9, "delta {delta}");
}

#[test]
fn bdp_rollouts_converge_to_the_value() {
    let inst = small(0.2, 0.25, Fleet { fd: 4, gw: 4, od: 4 }, 3);
    let ops = OpsModel::new(&inst).unwrap();
    let table: ValueTable = bdp_solve(&ops).unwrap();
    let s0 = FleetState::new(0, 2, 2, 0);
    let v0 = table.value(s0).unwrap();
    let report = evaluate(&ops, &Policy::BdpTable(table), s0, 2000, 5, &EvalOptions::default()).unwrap().report;
    let se = report.std_discounted / (report.rollouts as f64).sqrt();
    assert!((report.mean_discounted - v0).abs() <= 3.0 * se, "{} vs {v0} (se {se})", report.mean_discounted);
}
