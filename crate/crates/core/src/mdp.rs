//! Strategic fleet MDP: states, actions, binomial turnover and step costs.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial as BinomialPmf, Discrete};
use thiserror::Error;

use crate::fluid::{unmatched_cd_shares, FluidError, FluidSolution, OpsModel};
use crate::instance::Instance;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("action {action} is infeasible in state {state:?}")]
    InfeasibleAction { state: FleetState, action: i64 },
    #[error("matching-sensitive resignation needs the operational solution")]
    MissingSolution,
    #[error("transition support of {support} states exceeds the limit of {limit}")]
    StateSpaceTooLarge { support: u128, limit: u128 },
    #[error(transparent)]
    Fluid(#[from] FluidError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FleetState {
    pub n_fd: u32,
    pub n_gw: u32,
    pub n_od: u32,
    pub t: usize,
}

impl FleetState {
    pub fn new(n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> Self {
        Self { n_fd, n_gw, n_od, t }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransitionSample {
    pub x_fd: u32,
    pub x_gw: u32,
    pub x_od: u32,
    pub y_gw: u32,
    pub y_od: u32,
}

/// Resignation probabilities for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resignation {
    pub p_fd: f64,
    pub p_gw: f64,
    pub p_od: f64,
}

/// Components of one step's total cost ($).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepCost {
    pub ops: f64,
    pub fix: f64,
    pub sev: f64,
}

impl StepCost {
    pub fn total(&self) -> f64 {
        self.ops + self.fix + self.sev
    }
}

/// `C_ops + K (C_fix (n + a) + C_sev max(0, -a))`.
pub fn combine_cost(c_ops: f64, k: f64, c_fix: f64, n_after: u32, action: i64, c_sev: f64) -> StepCost {
    let fired = (-action).max(0) as f64;
    StepCost { ops: c_ops, fix: k * c_fix * n_after as f64, sev: if fired > 0.0 { k * c_sev * fired } else { 0.0 } }
}

pub fn check_action(inst: &Instance, s: FleetState, action: i64) -> Result<u32, MdpError> {
    let (lo, hi) = action_space(inst, s);
    if action < lo || action > hi {
        return Err(MdpError::InfeasibleAction { state: s, action });
    }
    Ok((s.n_fd as i64 + action) as u32)
}

/// Feasible hiring range `[lo, hi]`.
pub fn action_space(inst: &Instance, s: FleetState) -> (i64, i64) {
    let n = s.n_fd as i64;
    let cap = inst.strategic.caps.fd as i64;
    let lo = if inst.strategic.no_firing { 0 } else { -n };
    (lo, (cap - n).max(lo))
}

/// Total cost of taking `action` in `s`, priced from the cached cost curve.
pub fn total_cost(ops: &OpsModel, s: FleetState, action: i64) -> Result<StepCost, MdpError> {
    let inst = ops.instance();
    let n_after = check_action(inst, s, action)?;
    let c_ops = ops.ops_cost(n_after, s.n_gw, s.n_od, s.t)?;
    Ok(combine_cost(c_ops, inst.strategic.k_horizons as f64, inst.strategic.c_fix_per_horizon(), n_after, action, inst.strategic.c_sev))
}

/// Total cost together with the operational solution it was priced from.
pub fn total_cost_with_solution(ops: &OpsModel, s: FleetState, action: i64) -> Result<(StepCost, FluidSolution), MdpError> {
    let inst = ops.instance();
    let n_after = check_action(inst, s, action)?;
    let sol = ops.solve(n_after, s.n_gw, s.n_od, s.t)?;
    let c_ops = crate::fluid::rate_to_step_cost(inst, sol.cost_rate);
    let cost =
        combine_cost(c_ops, inst.strategic.k_horizons as f64, inst.strategic.c_fix_per_horizon(), n_after, action, inst.strategic.c_sev);
    Ok((cost, sol))
}

/// Resignation probabilities at the post-decision state. In matching-sensitive
/// mode the CD probabilities interpolate by the unmatched shares of `sol`.
pub fn resignation_prob(inst: &Instance, sol: Option<&FluidSolution>) -> Result<Resignation, MdpError> {
    if !inst.turnover.matching_sensitive {
        return Ok(resignation_from_shares(inst, None));
    }
    let sol = sol.ok_or(MdpError::MissingSolution)?;
    Ok(resignation_from_shares(inst, Some(unmatched_cd_shares(inst, sol))))
}

/// Resignation probabilities from precomputed unmatched shares `(gw, od)`.
pub fn resignation_from_shares(inst: &Instance, shares: Option<(f64, f64)>) -> Resignation {
    let tm = &inst.turnover;
    match shares {
        Some((gw, od)) if tm.matching_sensitive => {
            Resignation { p_fd: tm.p_fd, p_gw: tm.p_high * gw + tm.p_low * (1.0 - gw), p_od: tm.p_high * od + tm.p_low * (1.0 - od) }
        }
        _ => Resignation { p_fd: tm.p_fd, p_gw: tm.p_gw, p_od: tm.p_od },
    }
}

/// Probabilities for the given post-decision state, solving the fluid model
/// only when the resignation mode needs it.
pub fn resignation_at(ops: &OpsModel, post: FleetState) -> Result<Resignation, MdpError> {
    let inst = ops.instance();
    if !inst.turnover.matching_sensitive {
        return Ok(resignation_from_shares(inst, None));
    }
    let s = ops.summary(post.n_fd, post.n_gw, post.n_od, post.t)?;
    Ok(resignation_from_shares(inst, Some((s.unmatched_gw, s.unmatched_od))))
}

pub fn binomial_pmf(n: u32, p: f64) -> Vec<f64> {
    if p <= 0.0 || n == 0 {
        let mut v = vec![0.0; n as usize + 1];
        v[0] = 1.0;
        return v;
    }
    if p >= 1.0 {
        let mut v = vec![0.0; n as usize + 1];
        v[n as usize] = 1.0;
        return v;
    }
    let d = BinomialPmf::new(p, n as u64).expect("valid binomial");
    (0..=n as u64).map(|k| d.pmf(k)).collect()
}

/// Distribution of `n - x + y` with `x ~ Bin(n, p)`, `y ~ Bin(n, q)`, clamped to `cap`.
pub fn crowd_marginal(n: u32, p: f64, q: f64, cap: u32) -> Vec<(u32, f64)> {
    let leave = binomial_pmf(n, p);
    let join = binomial_pmf(n, q);
    let mut out = vec![0.0; cap as usize + 1];
    for (x, &px) in leave.iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        for (y, &py) in join.iter().enumerate() {
            if py == 0.0 {
                continue;
            }
            let next = (n as usize + y - x).min(cap as usize);
            out[next] += px * py;
        }
    }
    out.into_iter().enumerate().filter(|&(_, v)| v > 0.0).map(|(k, v)| (k as u32, v)).collect()
}

/// Distribution of `n - x` with `x ~ Bin(n, p)`, clamped to `cap`.
pub fn fd_marginal(n: u32, p: f64, cap: u32) -> Vec<(u32, f64)> {
    let leave = binomial_pmf(n, p);
    let mut out = vec![0.0; cap as usize + 1];
    for (x, &px) in leave.iter().enumerate() {
        if px > 0.0 {
            out[(n as usize - x).min(cap as usize)] += px;
        }
    }
    out.into_iter().enumerate().filter(|&(_, v)| v > 0.0).map(|(k, v)| (k as u32, v)).collect()
}

/// Per-dimension successor distributions of a post-decision state.
pub fn marginals(inst: &Instance, post: FleetState, r: Resignation) -> [Vec<(u32, f64)>; 3] {
    let caps = inst.strategic.caps;
    let tm = &inst.turnover;
    [
        fd_marginal(post.n_fd, r.p_fd, caps.fd),
        crowd_marginal(post.n_gw, r.p_gw, tm.q_gw, caps.gw),
        crowd_marginal(post.n_od, r.p_od, tm.q_od, caps.od),
    ]
}

pub const DEFAULT_SUPPORT_LIMIT: u128 = 5_000_000;

/// Successor distribution of a post-decision state under constant resignation.
pub fn transition_pmf(inst: &Instance, post: FleetState) -> Result<Vec<(FleetState, f64)>, MdpError> {
    transition_pmf_with(inst, post, resignation_from_shares(inst, None), DEFAULT_SUPPORT_LIMIT)
}

/// Successor distribution for given resignation probabilities.
pub fn transition_pmf_with(inst: &Instance, post: FleetState, r: Resignation, limit: u128) -> Result<Vec<(FleetState, f64)>, MdpError> {
    let support = (post.n_fd as u128 + 1) * (2 * post.n_gw as u128 + 1) * (2 * post.n_od as u128 + 1);
    if support > limit {
        return Err(MdpError::StateSpaceTooLarge { support, limit });
    }
    let [fd, gw, od] = marginals(inst, post, r);
    let mut out = Vec::with_capacity(fd.len() * gw.len() * od.len());
    for &(a, pa) in &fd {
        for &(b, pb) in &gw {
            for &(c, pc) in &od {
                out.push((FleetState::new(a, b, c, post.t + 1), pa * pb * pc));
            }
        }
    }
    Ok(out)
}

fn draw<R: Rng + ?Sized>(n: u32, p: f64, rng: &mut R) -> u32 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n as u64, p).expect("valid binomial").sample(rng) as u32
}

/// Draws turnover for the crowd dimensions from one stream and FD resignations
/// from another, so that crowd paths do not depend on hiring decisions.
pub fn sample_transition_split<R: Rng + ?Sized, S: Rng + ?Sized>(
    inst: &Instance,
    post: FleetState,
    r: Resignation,
    crowd_rng: &mut R,
    fd_rng: &mut S,
) -> (FleetState, TransitionSample) {
    let tm = &inst.turnover;
    let caps = inst.strategic.caps;
    let x = TransitionSample {
        x_gw: draw(post.n_gw, r.p_gw, crowd_rng),
        y_gw: draw(post.n_gw, tm.q_gw, crowd_rng),
        x_od: draw(post.n_od, r.p_od, crowd_rng),
        y_od: draw(post.n_od, tm.q_od, crowd_rng),
        x_fd: draw(post.n_fd, r.p_fd, fd_rng),
    };
    let next = FleetState::new(
        (post.n_fd - x.x_fd).min(caps.fd),
        (post.n_gw + x.y_gw - x.x_gw).min(caps.gw),
        (post.n_od + x.y_od - x.x_od).min(caps.od),
        post.t + 1,
    );
    (next, x)
}

pub fn sample_transition<R: Rng + ?Sized>(inst: &Instance, post: FleetState, r: Resignation, rng: &mut R) -> FleetState {
    let tm = &inst.turnover;
    let caps = inst.strategic.caps;
    let x_gw = draw(post.n_gw, r.p_gw, rng);
    let y_gw = draw(post.n_gw, tm.q_gw, rng);
    let x_od = draw(post.n_od, r.p_od, rng);
    let y_od = draw(post.n_od, tm.q_od, rng);
    let x_fd = draw(post.n_fd, r.p_fd, rng);
    FleetState::new(
        (post.n_fd - x_fd).min(caps.fd),
        (post.n_gw + y_gw - x_gw).min(caps.gw),
        (post.n_od + y_od - x_od).min(caps.od),
        post.t + 1,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Instance {
        let mut inst = Instance::single_zone(10.0, 1.0);
        inst.strategic.caps = crate::instance::Fleet { fd: 10, gw: 10, od: 10 };
        inst
    }

    #[test]
    fn cost_combination() {
        let c = combine_cost(100.0, 1.0, 10.0, 3, -2, 3.0);
        assert_eq!(c.total(), 136.0);
        let c = combine_cost(0.0, 1.0, 10.0, 0, 0, 3.0);
        assert_eq!(c.total(), 0.0);
    }

    #[test]
    fn zero_fleet_zero_demand_costs_nothing() {
        let inst = Instance::single_zone(0.0, 1.0);
        let ops = OpsModel::new(&inst).unwrap();
        assert_eq!(total_cost(&ops, FleetState::new(0, 0, 0, 0), 0).unwrap().total(), 0.0);
    }

    #[test]
    fn no_firing_rejects_negative_actions() {
        let mut inst = tiny();
        inst.strategic.no_firing = true;
        let ops = OpsModel::new(&inst).unwrap();
        let err = total_cost(&ops, FleetState::new(3, 0, 0, 0), -1).unwrap_err();
        assert!(matches!(err, MdpError::InfeasibleAction { .. }));
    }

    #[test]
    fn action_space_examples() {
        let mut inst = tiny();
        inst.strategic.no_firing = false;
        assert_eq!(action_space(&inst, FleetState::new(5, 0, 0, 0)), (-5, 5));
        assert_eq!(action_space(&inst, FleetState::new(10, 0, 0, 0)).1, 0);
        inst.strategic.no_firing = true;
        assert_eq!(action_space(&inst, FleetState::new(5, 0, 0, 0)), (0, 5));
    }

    #[test]
    fn resignation_modes() {
        let mut inst = tiny();
        let r = resignation_prob(&inst, None).unwrap();
        assert_eq!((r.p_fd, r.p_gw, r.p_od), (0.01, 0.01, 0.01));
        inst.turnover.matching_sensitive = true;
        assert!(matches!(resignation_prob(&inst, None), Err(MdpError::MissingSolution)));
        let r = resignation_from_shares(&inst, Some((1.0, 0.5)));
        assert_eq!(r.p_gw, 1.0);
        assert!((r.p_od - 0.505).abs() < 1e-15);
    }

    #[test]
    fn pmf_examples() {
        let inst = tiny();
        let pmf = transition_pmf(&inst, FleetState::new(2, 0, 0, 0)).unwrap();
        let p = |n| pmf.iter().filter(|(s, _)| s.n_fd == n).map(|(_, p)| p).sum::<f64>();
        assert!((p(2) - 0.9801).abs() < 1e-12);
        assert!((p(1) - 0.0198).abs() < 1e-12);
        assert!((p(0) - 0.0001).abs() < 1e-12);

        let pmf = transition_pmf(&inst, FleetState::new(1, 1, 0, 0)).unwrap();
        let stay = pmf.iter().find(|(s, _)| (s.n_fd, s.n_gw, s.n_od) == (1, 1, 0)).unwrap().1;
        // The GW count also stays at 1 when one leaves and one joins.
        assert!((stay - 0.99 * (0.99 * 0.91 + 0.01 * 0.09)).abs() < 1e-12);

        let pmf = transition_pmf(&inst, FleetState::new(0, 0, 0, 0)).unwrap();
        assert_eq!(pmf, vec![(FleetState::new(0, 0, 0, 1), 1.0)]);
    }

    #[test]
    fn clamping_merges_mass_at_the_cap() {
        let inst = tiny();
        let pmf = transition_pmf(&inst, FleetState::new(0, 10, 0, 0)).unwrap();
        let total: f64 = pmf.iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(pmf.iter().all(|(s, _)| s.n_gw <= 10));
    }

    #[test]
    fn support_limit() {
        let inst = tiny();
        let err = transition_pmf_with(&inst, FleetState::new(10, 10, 10, 0), resignation_from_shares(&inst, None), 100);
        assert!(matches!(err, Err(MdpError::StateSpaceTooLarge { .. })));
    }

    #[test]
    fn degenerate_sampling() {
        let mut inst = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        inst.turnover.p_fd = 0.0;
        inst.turnover.p_gw = 0.0;
        inst.turnover.p_od = 0.0;
        inst.turnover.q_gw = 0.0;
        inst.turnover.q_od = 0.0;
        let post = FleetState::new(3, 4, 5, 0);
        let r = resignation_from_shares(&inst, None);
        assert_eq!(sample_transition(&inst, post, r, &mut rng), FleetState::new(3, 4, 5, 1));
        inst.turnover.p_fd = 1.0;
        let r = resignation_from_shares(&inst, None);
        assert_eq!(sample_transition(&inst, post, r, &mut rng).n_fd, 0);
    }

    #[test]
    fn sampled_mean_matches_binomial_means() {
        let mut inst = tiny();
        inst.strategic.caps.gw = 1000;
        let post = FleetState::new(0, 100, 0, 0);
        let r = resignation_from_shares(&inst, None);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_transition(&inst, post, r, &mut rng).n_gw as f64).sum::<f64>() / n as f64;
        let sd = (100.0 * 0.09 * 0.91 + 100.0 * 0.01 * 0.99f64).sqrt();
        assert!((mean - 108.0).abs() <= 3.0 * sd / (n as f64).sqrt(), "mean {mean}");
    }
}
