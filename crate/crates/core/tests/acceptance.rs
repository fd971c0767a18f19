//! Acceptance criteria. Each test prints one PASS/FAIL line; run with
//! `cargo test -p crowdfleet --test acceptance -- --nocapture`.

use std::collections::HashMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crowdfleet::dp::{bdp_solve, plvfa_train, InitialState, PlvfaConfig, ValueTable};
use crowdfleet::eval::{evaluate, run_rollouts, EvalOptions, Policy};
use crowdfleet::fluid::{analytic_penalty, solve_fraction_form, OpsModel};
use crowdfleet::instance::{DemandCurve, Fleet, Instance};
use crowdfleet::mdp::{resignation_from_shares, sample_transition, transition_pmf, FleetState};
use crowdfleet::sim::{derive_routing, simulate, SimConfig};

fn report(id: u32, pass: bool, what: &str, detail: String) {
    println!("criterion {id} [{}] {what}: {detail}", if pass { "PASS" } else { "FAIL" });
}

/// Two zones, caps 4x4x4, T = 3, layoffs allowed.
fn tiny_two_zone() -> Instance {
    let mut inst = Instance::single_zone(30.0, 2.0);
    inst.name = "tiny-two-zone".into();
    inst.zones = 2;
    inst.distance_km = vec![vec![2.0, 5.0], vec![5.0, 3.0]];
    inst.request_pattern = vec![vec![0.7, 0.3], vec![0.4, 0.6]];
    inst.demand_weights = vec![0.6, 0.4];
    inst.demand = DemandCurve::Geometric { total_at_horizon: 40.0, growth: 1.25 };
    inst.gw.active_share = 0.5;
    inst.od.intensity = Some(vec![0.5, 0.5]);
    inst.od.active_share = 0.25;
    inst.od.route_pattern = Some(vec![vec![0.5, 0.5], vec![0.2, 0.8]]);
    inst.turnover.p_fd = 0.1;
    inst.turnover.p_gw = 0.3;
    inst.turnover.p_od = 0.2;
    inst.turnover.q_gw = 0.25;
    inst.turnover.q_od = 0.15;
    inst.strategic.horizon = 3;
    inst.strategic.gamma = 0.95;
    inst.strategic.no_firing = false;
    inst.strategic.c_sev = 3.0;
    inst.strategic.caps = Fleet { fd: 4, gw: 4, od: 4 };
    inst.strategic.initial = Fleet { fd: 0, gw: 2, od: 2 };
    inst.validate().expect("tiny instance is valid");
    inst
}

// ---------------------------------------------------------------------------
// Criterion 1 oracle: memoized expectimax over the full joint turnover space.

fn choose(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn binom(n: u32, k: u32, p: f64) -> f64 {
    choose(n, k) * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

struct Expectimax<'a> {
    inst: &'a Instance,
    ops_cost: HashMap<(u32, u32, u32, usize), f64>,
    memo: HashMap<(u32, u32, u32, usize), f64>,
}

impl Expectimax<'_> {
    fn c_ops(&mut self, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> f64 {
        let inst = self.inst;
        *self.ops_cost.entry((n_fd, n_gw, n_od, t)).or_insert_with(|| {
            let rate = if n_fd == 0 {
                analytic_penalty(inst, &vec![0.0; inst.zones], n_gw, n_od, t).unwrap().total()
            } else {
                solve_fraction_form(inst, n_fd, n_gw, n_od, t).expect("fraction form solves").0.cost_rate
            };
            rate * inst.strategic.ops_window_minutes / 60.0 * inst.strategic.k_horizons as f64
        })
    }

    fn value(&mut self, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> f64 {
        if let Some(&v) = self.memo.get(&(n_fd, n_gw, n_od, t)) {
            return v;
        }
        let st = self.inst.strategic.clone();
        let tm = self.inst.turnover.clone();
        let k = st.k_horizons as f64;
        let wage = st.c_fix_per_hour * st.ops_window_minutes / 60.0;
        let lo = if st.no_firing { 0 } else { -(n_fd as i64) };
        let mut best = f64::INFINITY;
        for a in lo..=(st.caps.fd as i64 - n_fd as i64) {
            let n = (n_fd as i64 + a) as u32;
            let mut cost = self.c_ops(n, n_gw, n_od, t) + k * wage * n as f64 + k * st.c_sev * (-a).max(0) as f64;
            if t < st.horizon {
                let mut ev = 0.0;
                for xf in 0..=n {
                    for xg in 0..=n_gw {
                        for yg in 0..=n_gw {
                            for xo in 0..=n_od {
                                for yo in 0..=n_od {
                                    let p = binom(n, xf, tm.p_fd)
                                        * binom(n_gw, xg, tm.p_gw)
                                        * binom(n_gw, yg, tm.q_gw)
                                        * binom(n_od, xo, tm.p_od)
                                        * binom(n_od, yo, tm.q_od);
                                    if p == 0.0 {
                                        continue;
                                    }
                                    let g = (n_gw + yg - xg).min(st.caps.gw);
                                    let o = (n_od + yo - xo).min(st.caps.od);
                                    ev += p * self.value(n - xf, g, o, t + 1);
                                }
                            }
                        }
                    }
                }
                cost += st.gamma * ev;
            }
            best = best.min(cost);
        }
        self.memo.insert((n_fd, n_gw, n_od, t), best);
        best
    }
}

#[test]
fn criterion_1_bdp_matches_exhaustive_expectimax() {
    let inst = tiny_two_zone();
    let t0 = Instant::now();
    let ops = OpsModel::new(&inst).unwrap();
    let table = bdp_solve(&ops).unwrap();
    let mut oracle = Expectimax { inst: &inst, ops_cost: HashMap::new(), memo: HashMap::new() };
    let caps = inst.strategic.caps;
    let mut worst = 0.0f64;
    for t in 0..=inst.strategic.horizon {
        for f in 0..=caps.fd {
            for g in 0..=caps.gw {
                for o in 0..=caps.od {
                    let want = oracle.value(f, g, o, t);
                    let got = table.value(FleetState::new(f, g, o, t)).unwrap();
                    worst = worst.max((got - want).abs() / want.abs().max(1.0));
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst <= 1e-9 && elapsed.as_secs() < 60;
    report(1, pass, "BDP equals exhaustive expectimax", format!("max rel err {worst:.2e} in {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_2_plvfa_gap_to_bdp() {
    let mut inst = Instance::builtin_grubhub();
    inst.demand = DemandCurve::Geometric { total_at_horizon: 150.0, growth: 1.003 };
    inst.strategic.caps = Fleet { fd: 30, gw: 30, od: 0 };
    inst.strategic.initial = Fleet { fd: 0, gw: 5, od: 0 };
    inst.turnover.q_gw = 0.3;
    inst.validate().unwrap();
    let t0 = Instant::now();
    let ops = OpsModel::new(&inst).unwrap();
    let table = bdp_solve(&ops).unwrap();
    let mut cfg = PlvfaConfig::new(10_000, 42);
    cfg.alpha = 0.05;
    cfg.k_gw = 1;
    cfg.k_od = 1;
    cfg.initial = InitialState::Point { n_fd: 0, n_gw: 5, n_od: 0 };
    let slopes = plvfa_train(&ops, &cfg).unwrap().table;
    let s0 = FleetState::new(0, 5, 0, 0);
    let opts = EvalOptions::default();
    let mean = |p: &Policy| evaluate(&ops, p, s0, 50, 7, &opts).unwrap().report.mean_cost;
    let bdp = mean(&Policy::BdpTable(table));
    let my = 100.0 * (mean(&Policy::Myopic) - bdp) / bdp;
    let pl = 100.0 * (mean(&Policy::Plvfa(slopes)) - bdp) / bdp;
    let elapsed = t0.elapsed();
    let pass = pl <= 2.0 && pl < my && elapsed.as_secs() < 1800;
    report(2, pass, "PL-VFA gap to BDP within 2% and below myopic", format!("PL-VFA {pl:.3}%, myopic {my:.3}% in {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_3_ops_cost_convex_in_fixed_drivers() {
    let inst = Instance::builtin_grubhub();
    let t = inst.strategic.horizon;
    let t0 = Instant::now();
    let ops = OpsModel::new(&inst).unwrap();
    let mut worst = 0.0f64;
    let mut curve_err = 0.0f64;
    for &(g, o) in &[(0u32, 0u32), (500, 500), (2000, 0), (0, 3000), (1500, 4000)] {
        let n_opt = ops.min_fd_full_service(g, o, t).unwrap();
        let hi = (1.5 * n_opt as f64).ceil() as u32;
        let c: Vec<f64> = (0..=hi).map(|n| ops.ops_cost(n, g, o, t).unwrap()).collect();
        for n in 1..c.len() - 1 {
            let second = (c[n + 1] - c[n]) - (c[n] - c[n - 1]);
            worst = worst.max(-second / c[n].abs().max(1.0));
        }
        // The curve is a sweep of one engine; spot-check it against fresh solves.
        for n in (0..=hi).step_by((hi as usize / 12).max(1)) {
            let fresh = ops.solve(n, g, o, t).unwrap().cost_rate;
            let rate = ops.cost_rate(n, g, o, t).unwrap();
            curve_err = curve_err.max((fresh - rate).abs() / fresh.abs().max(1.0));
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst <= 1e-6 && curve_err <= 1e-6 && elapsed.as_secs() < 600;
    report(3, pass, "C_ops convex in n_fd", format!("worst rel violation {worst:.2e}, curve vs solve {curve_err:.2e} in {elapsed:.2?}"));
    assert!(pass);
}

fn second_difference_violation(inst: &Instance, table: &ValueTable) -> f64 {
    let caps = inst.strategic.caps;
    let scale = table.values.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for t in 0..=inst.strategic.horizon {
        for g in 0..=caps.gw {
            for o in 0..=caps.od {
                let v: Vec<f64> = (0..=caps.fd).map(|f| table.value(FleetState::new(f, g, o, t)).unwrap()).collect();
                for w in v.windows(3) {
                    worst = worst.max(-(w[2] - 2.0 * w[1] + w[0]) / scale);
                }
            }
        }
    }
    worst
}

#[test]
fn criterion_4_value_function_convex_in_fixed_drivers() {
    let inst = tiny_two_zone();
    let ops = OpsModel::new(&inst).unwrap();
    let worst = second_difference_violation(&inst, &bdp_solve(&ops).unwrap());
    let pass = worst <= 1e-6;
    report(4, pass, "BDP values convex in n_fd", format!("worst scaled second difference {:.2e}", -worst));
    assert!(pass);
}

#[test]
fn criterion_5_fluid_lower_bound() {
    let base = Instance::builtin_grubhub();
    let t = base.strategic.horizon;
    let mut margins = Vec::new();
    let mut details = Vec::new();
    let mut bound_ok = true;
    for (scale, seeds, hours) in [(1u32, 20u64, 20.0), (4, 4, 20.0), (16, 2, 10.0)] {
        let inst = base.with_demand_scaled(0.25 * scale as f64);
        let (n, g, o) = (200 * scale, 25 * scale, 100 * scale);
        let ops = OpsModel::new(&inst).unwrap();
        let sol = ops.solve(n, g, o, t).unwrap();
        let routing = derive_routing(&inst, &sol);
        let cfg = SimConfig { hours, ..Default::default() };
        let rates: Vec<f64> = (0..seeds)
            .map(|seed| simulate(&inst, n, g, o, t, &routing, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().cost_rate)
            .collect();
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        if scale == 1 {
            bound_ok = mean >= sol.cost_rate * 0.98;
        }
        let margin = (mean - sol.cost_rate) / sol.cost_rate;
        margins.push(margin);
        details.push(format!("x{scale}: sim {mean:.1} lp {:.1} margin {margin:.3}", sol.cost_rate));
    }
    let shrinking = margins.windows(2).all(|w| w[1] < w[0]);
    let pass = bound_ok && shrinking;
    report(5, pass, "queue simulation bounded below by the fluid LP", details.join("; "));
    assert!(pass);
}

#[test]
fn criterion_6_analytic_penalty_matches_lp() {
    use rand::Rng;
    let inst = Instance::builtin_grubhub();
    let ops = OpsModel::new(&inst).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..25 {
        let f = rng.random_range(0..=1500);
        let g = rng.random_range(0..=3000);
        let o = rng.random_range(0..=5000);
        let t = rng.random_range(0..=inst.strategic.horizon);
        let sol = ops.solve(f, g, o, t).unwrap();
        let plan = analytic_penalty(&inst, &sol.a_fd, g, o, t).unwrap();
        let analytic = plan.total() + sol.rates.fd_relocation;
        worst = worst.max((analytic - sol.cost_rate).abs() / sol.cost_rate.abs().max(1.0));
    }
    let pass = worst <= 1e-6;
    report(6, pass, "analytic outsourcing equals LP objective", format!("max rel err {worst:.2e} over 25 states"));
    assert!(pass);
}

#[test]
fn criterion_7_transition_model() {
    let inst = tiny_two_zone();
    let r = resignation_from_shares(&inst, None);
    let mut worst_sum = 0.0f64;
    let mut worst_z = 0.0f64;
    for post in [FleetState::new(4, 4, 4, 0), FleetState::new(2, 3, 1, 1), FleetState::new(0, 4, 0, 2)] {
        let pmf = transition_pmf(&inst, post).unwrap();
        worst_sum = worst_sum.max((pmf.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs());
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7 + post.n_fd as u64);
        let mut counts: HashMap<FleetState, u32> = HashMap::new();
        for _ in 0..n {
            *counts.entry(sample_transition(&inst, post, r, &mut rng)).or_default() += 1;
        }
        for (s, p) in &pmf {
            let freq = counts.get(s).copied().unwrap_or(0) as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            if se > 0.0 {
                worst_z = worst_z.max((freq - p).abs() / se);
            }
        }
        assert!(counts.keys().all(|s| pmf.iter().any(|(k, _)| k == s)), "sample outside support");
    }
    let pass = worst_sum <= 1e-12 && worst_z <= 4.0;
    report(7, pass, "transition pmfs and sampling", format!("max |sum - 1| {worst_sum:.2e}, max z {worst_z:.2}"));
    assert!(pass);
}

#[test]
fn criterion_8_plvfa_hires_fewer_surplus_drivers() {
    let mut inst = Instance::builtin_grubhub();
    inst.turnover.q_gw = 0.09;
    let t0 = Instant::now();
    let ops = OpsModel::new(&inst).unwrap();
    let mut cfg = PlvfaConfig::new(20, 42);
    cfg.alpha = 0.3;
    cfg.initial = InitialState::Point { n_fd: 0, n_gw: 500, n_od: 500 };
    let slopes = plvfa_train(&ops, &cfg).unwrap().table;
    let s0 = FleetState::new(0, 500, 500, 0);
    let overhire = |p: &Policy| {
        let trajs = run_rollouts(&ops, p, s0, 50, 8, 1).unwrap();
        let gaps: Vec<f64> = trajs
            .iter()
            .map(|tr| {
                let last = tr.steps.last().unwrap();
                let opt = ops.min_fd_full_service(last.state.n_gw, last.state.n_od, last.state.t).unwrap();
                last.n_fd_post as f64 - opt as f64
            })
            .collect();
        gaps.iter().sum::<f64>() / gaps.len() as f64
    };
    let my = overhire(&Policy::Myopic);
    let pl = overhire(&Policy::Plvfa(slopes));
    let pass = pl < my;
    report(8, pass, "PL-VFA terminal over-hiring below myopic", format!("PL-VFA {pl:.2}, myopic {my:.2} in {:.2?}", t0.elapsed()));
    assert!(pass);
}

#[test]
fn criterion_9_metric_identities() {
    let inst = tiny_two_zone();
    let ops = OpsModel::new(&inst).unwrap();
    let s0 = FleetState::new(0, 2, 2, 0);
    let opts = EvalOptions { compare_myopic: true, compare_fd_only: true, ..Default::default() };
    let report9 = evaluate(&ops, &Policy::Myopic, s0, 30, 9, &opts).unwrap().report;
    let h = report9.h.unwrap();
    let h_bar = report9.h_bar.unwrap();
    let shares = report9.shares.sum();
    let delta = report9.delta_myopic.unwrap();
    let pass = h_bar == 100.0 - h && (shares - 1.0).abs() <= 1e-9 && delta == 0.0;
    report(9, pass, "metric identities", format!("h {h:.4} h_bar {h_bar:.4}, shares sum {shares:.12}, delta_MY(MY) {delta}"));
    assert!(pass);
}
