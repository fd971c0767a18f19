//! Policies, Monte Carlo rollouts and reported metrics.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dp::{convex_int_argmin, plvfa_greedy_action, try_convex_int_argmin, DpError, SlopeTable, ValueTable};
use crate::fluid::{rate_to_step_cost, FluidError, OpsModel};
use crate::mdp::{action_space, combine_cost, resignation_at, sample_transition_split, total_cost, FleetState, MdpError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("at least one rollout is required")]
    NoRollouts,
    #[error("state {0:?} is outside the value table")]
    OutsideTable(FleetState),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Fluid(#[from] FluidError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// One-step total-cost argmin.
    Myopic,
    /// Myopic hiring with both crowd fleets pinned to zero.
    FdOnlyMyopic,
    BdpTable(ValueTable),
    Plvfa(SlopeTable),
    /// Always takes action 0.
    NeverHire,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Myopic => "myopic",
            Policy::FdOnlyMyopic => "fd-only-myopic",
            Policy::BdpTable(_) => "bdp",
            Policy::Plvfa(_) => "plvfa",
            Policy::NeverHire => "never-hire",
        }
    }

    pub fn action(&self, ops: &OpsModel, s: FleetState) -> Result<i64, EvalError> {
        match self {
            Policy::Myopic | Policy::FdOnlyMyopic => myopic_action(ops, s),
            Policy::BdpTable(table) => table.action(s).ok_or(EvalError::OutsideTable(s)),
            Policy::Plvfa(slopes) => Ok(plvfa_greedy_action(ops, s, slopes)?.0),
            Policy::NeverHire => Ok(0),
        }
    }
}

/// Action minimizing the current step's total cost.
pub fn myopic_action(ops: &OpsModel, s: FleetState) -> Result<i64, EvalError> {
    let (lo, hi) = action_space(ops.instance(), s);
    let (a, _) = try_convex_int_argmin(|a| -> Result<f64, MdpError> { Ok(total_cost(ops, s, a)?.total()) }, lo, hi)?;
    Ok(a)
}

/// Per-rollout random streams. Crowd turnover and FD resignations use
/// separate streams so crowd paths are shared by every compared policy.
#[derive(Debug, Clone)]
pub struct RolloutRng {
    pub crowd: ChaCha8Rng,
    pub fd: ChaCha8Rng,
}

impl RolloutRng {
    pub fn new(master_seed: u64, rollout: u64) -> Self {
        let mut crowd = ChaCha8Rng::seed_from_u64(master_seed);
        crowd.set_stream(2 * rollout);
        let mut fd = ChaCha8Rng::seed_from_u64(master_seed);
        fd.set_stream(2 * rollout + 1);
        Self { crowd, fd }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: FleetState,
    pub action: i64,
    pub n_fd_post: u32,
    pub c_ops: f64,
    pub c_fix: f64,
    pub c_sev: f64,
    /// Operational cost components for the step ($).
    pub fd_serving: f64,
    pub fd_relocation: f64,
    pub gw: f64,
    pub od: f64,
    pub penalty: f64,
    pub service_level: f64,
    pub unmatched_gw: f64,
    pub unmatched_od: f64,
    pub next: FleetState,
    pub discount: f64,
}

impl StepRecord {
    pub fn total(&self) -> f64 {
        self.c_ops + self.c_fix + self.c_sev
    }

    /// Share of the step's total cost paid as penalties.
    pub fn penalty_share(&self) -> f64 {
        let total = self.total();
        if total > 0.0 {
            self.penalty / total
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub policy: String,
    pub rollout: u64,
    pub steps: Vec<StepRecord>,
    pub cumulative: f64,
    pub cumulative_undiscounted: f64,
}

pub fn rollout(ops: &OpsModel, policy: &Policy, s0: FleetState, rollout_index: u64, rng: &mut RolloutRng) -> Result<Trajectory, EvalError> {
    let inst = ops.instance();
    let sc = &inst.strategic;
    let mut s = s0;
    if *policy == Policy::FdOnlyMyopic {
        s.n_gw = 0;
        s.n_od = 0;
    }
    let mut steps = Vec::with_capacity(sc.horizon + 1 - s0.t.min(sc.horizon));
    let (mut cum, mut cum_u) = (0.0, 0.0);
    for t in s0.t..=sc.horizon {
        s.t = t;
        let action = policy.action(ops, s)?;
        let n_post = crate::mdp::check_action(inst, s, action)?;
        let summary = ops.summary(n_post, s.n_gw, s.n_od, t)?;
        let cost = combine_cost(
            rate_to_step_cost(inst, summary.cost_rate),
            sc.k_horizons as f64,
            sc.c_fix_per_horizon(),
            n_post,
            action,
            sc.c_sev,
        );
        let post = FleetState::new(n_post, s.n_gw, s.n_od, t);
        let r = resignation_at(ops, post)?;
        let (next, _) = sample_transition_split(inst, post, r, &mut rng.crowd, &mut rng.fd);
        let step_cost = |rate: f64| rate_to_step_cost(inst, rate);
        let discount = sc.gamma.powi((t - s0.t) as i32);
        let rec = StepRecord {
            state: s,
            action,
            n_fd_post: n_post,
            c_ops: cost.ops,
            c_fix: cost.fix,
            c_sev: cost.sev,
            fd_serving: step_cost(summary.rates.fd_serving),
            fd_relocation: step_cost(summary.rates.fd_relocation),
            gw: step_cost(summary.rates.gw),
            od: step_cost(summary.rates.od),
            penalty: step_cost(summary.rates.penalty),
            service_level: summary.service_level,
            unmatched_gw: summary.unmatched_gw,
            unmatched_od: summary.unmatched_od,
            next,
            discount,
        };
        cum += discount * rec.total();
        cum_u += rec.total();
        steps.push(rec);
        s = next;
    }
    Ok(Trajectory { policy: policy.name().into(), rollout: rollout_index, steps, cumulative: cum, cumulative_undiscounted: cum_u })
}

/// Rollouts `0..n` on common streams, spread over `jobs` worker threads.
pub fn run_rollouts(
    ops: &OpsModel,
    policy: &Policy,
    s0: FleetState,
    n: usize,
    master_seed: u64,
    jobs: usize,
) -> Result<Vec<Trajectory>, EvalError> {
    let jobs = jobs.clamp(1, n.max(1));
    let run = |i: usize| rollout(ops, policy, s0, i as u64, &mut RolloutRng::new(master_seed, i as u64));
    if jobs == 1 {
        return (0..n).map(run).collect();
    }
    let mut slots: Vec<Option<Result<Trajectory, EvalError>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let run = &run;
                scope.spawn(move || (w..n).step_by(jobs).map(|i| (i, run(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("rollout worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every rollout ran")).collect()
}

/// `n_post - n_opt` per step, with `n_opt` the smallest full-service FD count
/// for the realized crowd fleet and demand.
pub fn hiring_gap_series(ops: &OpsModel, traj: &Trajectory) -> Result<Vec<i64>, EvalError> {
    traj.steps
        .iter()
        .map(|r| {
            let opt = ops.min_fd_full_service(r.state.n_gw, r.state.n_od, r.state.t)?;
            Ok(r.n_fd_post as i64 - opt as i64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostShares {
    pub fd_fix: f64,
    pub fd_variable: f64,
    pub gw: f64,
    pub od: f64,
    pub penalty: f64,
    pub severance: f64,
}

impl CostShares {
    pub fn sum(&self) -> f64 {
        self.fd_fix + self.fd_variable + self.gw + self.od + self.penalty + self.severance
    }
}

/// Shares of cumulative (undiscounted) cost by component; all zero when nothing was spent.
pub fn cost_breakdown(trajectories: &[Trajectory]) -> CostShares {
    let mut c = CostShares::default();
    for r in trajectories.iter().flat_map(|t| &t.steps) {
        c.fd_fix += r.c_fix;
        c.fd_variable += r.fd_serving + r.fd_relocation;
        c.gw += r.gw;
        c.od += r.od;
        c.penalty += r.penalty;
        c.severance += r.c_sev;
    }
    let total = c.sum();
    if total <= 0.0 {
        return CostShares::default();
    }
    CostShares {
        fd_fix: c.fd_fix / total,
        fd_variable: c.fd_variable / total,
        gw: c.gw / total,
        od: c.od / total,
        penalty: c.penalty / total,
        severance: c.severance / total,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOptions {
    /// Expected discounted cost of an optimal policy, e.g. a BDP value.
    pub oracle: Option<f64>,
    pub compare_myopic: bool,
    pub compare_fd_only: bool,
    pub hiring_gap: bool,
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub policy: String,
    pub rollouts: usize,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub mean_discounted: f64,
    pub std_discounted: f64,
    /// `100 (C - V) / V` against the oracle, on discounted cost.
    pub delta_oracle: Option<f64>,
    /// `100 (C - C_MY) / C_MY`.
    pub delta_myopic: Option<f64>,
    /// `100 C / C_FD-only`.
    pub h: Option<f64>,
    pub h_bar: Option<f64>,
    /// Mean `n_post - n_opt` per step.
    pub hiring_gap: Option<Vec<f64>>,
    pub mean_service_level: f64,
    pub shares: CostShares,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub trajectories: Vec<Trajectory>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn evaluate(
    ops: &OpsModel,
    policy: &Policy,
    s0: FleetState,
    n_rollouts: usize,
    master_seed: u64,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    if n_rollouts == 0 {
        return Err(EvalError::NoRollouts);
    }
    let trajs = run_rollouts(ops, policy, s0, n_rollouts, master_seed, opts.jobs)?;
    let undiscounted: Vec<f64> = trajs.iter().map(|t| t.cumulative_undiscounted).collect();
    let discounted: Vec<f64> = trajs.iter().map(|t| t.cumulative).collect();
    let (mean_cost, std_cost) = mean_std(&undiscounted);
    let (mean_discounted, std_discounted) = mean_std(&discounted);

    let baseline = |other: &Policy| -> Result<f64, EvalError> {
        if other == policy {
            return Ok(mean_cost);
        }
        let runs = run_rollouts(ops, other, s0, n_rollouts, master_seed, opts.jobs)?;
        Ok(mean_std(&runs.iter().map(|t| t.cumulative_undiscounted).collect::<Vec<_>>()).0)
    };
    let delta_myopic = if opts.compare_myopic {
        let my = baseline(&Policy::Myopic)?;
        Some(if mean_cost == my { 0.0 } else { 100.0 * (mean_cost - my) / my })
    } else {
        None
    };
    let h = if opts.compare_fd_only { Some(100.0 * mean_cost / baseline(&Policy::FdOnlyMyopic)?) } else { None };
    let hiring_gap = if opts.hiring_gap {
        let series: Vec<Vec<i64>> = trajs.iter().map(|t| hiring_gap_series(ops, t)).collect::<Result<_, _>>()?;
        let len = series.iter().map(Vec::len).max().unwrap_or(0);
        Some(
            (0..len)
                .map(|k| {
                    let xs: Vec<f64> = series.iter().filter_map(|s| s.get(k)).map(|&v| v as f64).collect();
                    xs.iter().sum::<f64>() / xs.len() as f64
                })
                .collect(),
        )
    } else {
        None
    };
    let levels: Vec<f64> = trajs.iter().flat_map(|t| t.steps.iter().map(|r| r.service_level)).collect();
    let report = EvalReport {
        policy: policy.name().into(),
        rollouts: n_rollouts,
        mean_cost,
        std_cost,
        mean_discounted,
        std_discounted,
        delta_oracle: opts.oracle.map(|v| 100.0 * (mean_discounted - v) / v),
        delta_myopic,
        h,
        h_bar: h.map(|h| 100.0 - h),
        hiring_gap,
        mean_service_level: mean_std(&levels).0,
        shares: cost_breakdown(&trajs),
    };
    Ok(Evaluation { report, trajectories: trajs })
}

// ---------------------------------------------------------------------------
// CSV output

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trajectory_csv<W: Write>(out: W, trajectories: &[Trajectory]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "policy",
        "rollout",
        "t",
        "n_fd",
        "n_gw",
        "n_od",
        "action",
        "n_fd_post",
        "c_ops",
        "c_fix",
        "c_sev",
        "total",
        "fd_serving",
        "fd_relocation",
        "gw",
        "od",
        "penalty",
        "penalty_share",
        "service_level",
        "unmatched_gw",
        "unmatched_od",
        "next_fd",
        "next_gw",
        "next_od",
    ])?;
    for tr in trajectories {
        for r in &tr.steps {
            w.write_record([
                tr.policy.clone(),
                tr.rollout.to_string(),
                r.state.t.to_string(),
                r.state.n_fd.to_string(),
                r.state.n_gw.to_string(),
                r.state.n_od.to_string(),
                r.action.to_string(),
                r.n_fd_post.to_string(),
                r.c_ops.to_string(),
                r.c_fix.to_string(),
                r.c_sev.to_string(),
                r.total().to_string(),
                r.fd_serving.to_string(),
                r.fd_relocation.to_string(),
                r.gw.to_string(),
                r.od.to_string(),
                r.penalty.to_string(),
                r.penalty_share().to_string(),
                r.service_level.to_string(),
                r.unmatched_gw.to_string(),
                r.unmatched_od.to_string(),
                r.next.n_fd.to_string(),
                r.next.n_gw.to_string(),
                r.next.n_od.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(out: W, reports: &[EvalReport]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "policy",
        "rollouts",
        "mean_cost",
        "std_cost",
        "mean_discounted",
        "std_discounted",
        "delta_oracle",
        "delta_myopic",
        "h",
        "h_bar",
        "terminal_hiring_gap",
        "service_level",
        "share_fd_fix",
        "share_fd_variable",
        "share_gw",
        "share_od",
        "share_penalty",
        "share_severance",
    ])?;
    for r in reports {
        let terminal = r.hiring_gap.as_ref().and_then(|g| g.last().copied());
        w.write_record([
            r.policy.clone(),
            r.rollouts.to_string(),
            r.mean_cost.to_string(),
            r.std_cost.to_string(),
            r.mean_discounted.to_string(),
            r.std_discounted.to_string(),
            opt(r.delta_oracle),
            opt(r.delta_myopic),
            opt(r.h),
            opt(r.h_bar),
            opt(terminal),
            r.mean_service_level.to_string(),
            r.shares.fd_fix.to_string(),
            r.shares.fd_variable.to_string(),
            r.shares.gw.to_string(),
            r.shares.od.to_string(),
            r.shares.penalty.to_string(),
            r.shares.severance.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a sensitivity sweep in long format.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parameter", "value", "metric", "mean", "std"])?;
    for r in rows {
        w.write_record([r.parameter.clone(), r.value.to_string(), r.metric.clone(), r.mean.to_string(), r.std.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Sweep rows for one evaluated grid point.
pub fn sweep_rows(parameter: &str, value: f64, eval: &Evaluation) -> Vec<SweepRow> {
    let r = &eval.report;
    let row = |metric: &str, mean: f64, std: f64| SweepRow { parameter: parameter.into(), value, metric: metric.into(), mean, std };
    let mut rows = vec![row("cost", r.mean_cost, r.std_cost), row("discounted_cost", r.mean_discounted, r.std_discounted)];
    let finals: Vec<f64> = eval.trajectories.iter().filter_map(|t| t.steps.last()).map(|s| s.n_fd_post as f64).collect();
    let (m, s) = mean_std(&finals);
    rows.push(row("terminal_n_fd", m, s));
    if let Some(d) = r.delta_myopic {
        rows.push(row("delta_myopic", d, 0.0));
    }
    if let (Some(h), Some(hb)) = (r.h, r.h_bar) {
        rows.push(row("h", h, 0.0));
        rows.push(row("h_bar", hb, 0.0));
    }
    if let Some(g) = r.hiring_gap.as_ref().and_then(|g| g.last()) {
        rows.push(row("terminal_hiring_gap", *g, 0.0));
    }
    rows.push(row("service_level", r.mean_service_level, 0.0));
    let sh = r.shares;
    for (name, v) in [
        ("share_fd_fix", sh.fd_fix),
        ("share_fd_variable", sh.fd_variable),
        ("share_gw", sh.gw),
        ("share_od", sh.od),
        ("share_penalty", sh.penalty),
        ("share_severance", sh.severance),
    ] {
        rows.push(row(name, v, 0.0));
    }
    rows
}

/// Convex one-step search used by tests that need the myopic value too.
pub fn myopic_value(ops: &OpsModel, s: FleetState) -> Result<(i64, f64), EvalError> {
    let (lo, hi) = action_space(ops.instance(), s);
    let mut err = None;
    let best = convex_int_argmin(
        |a| match total_cost(ops, s, a) {
            Ok(c) => c.total(),
            Err(e) => {
                err.get_or_insert(e);
                f64::INFINITY
            }
        },
        lo,
        hi,
    )?;
    match err {
        Some(e) => Err(e.into()),
        None => Ok(best),
    }
}
