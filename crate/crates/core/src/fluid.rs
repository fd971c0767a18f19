//! Operational fluid model.
//!
//! Two equivalent LP formulations are provided. [`build_fluid_lp`] states the
//! model over request fractions `a` and fluid stocks `e`, `f`. [`OpsModel`]
//! solves a rate form of the same model whose variables are served and
//! relocated flows (requests/h and trips/h):
//!
//! * `s_i = lambda_i a_i` FD-served rate at origin `i`,
//! * `g_ij`, `o_ij`, `u_ij` rates given to GWs, ODs and left unmatched,
//! * `R_ij = n mu_ij e_ij` relocation trips from `i` to `j`.
//!
//! In the rate form the fleet size only appears as the right-hand side of one
//! row, so `C_ops(n)` is convex and piecewise linear in `n` and a whole curve
//! is traced by a single parametric sweep.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::instance::{Instance, InstanceError, RelocationCost};
use crate::lp::{LpError, LpProblem, LpSolution, LpStatus, Relation, RhsBreakpoint, SimplexOptions, WarmSimplex};

#[derive(Debug, Error)]
pub enum FluidError {
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error("the fraction form needs at least one fixed driver")]
    NoFixedDrivers,
    #[error("LP solver failed: {0}")]
    Solver(#[from] LpError),
    #[error("fluid LP ended with status {0:?}")]
    Status(LpStatus),
    #[error("full service not reachable with {0} fixed drivers")]
    Unreachable(u64),
}

/// Operational cost rates by component ($/h).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostRates {
    pub fd_serving: f64,
    pub fd_relocation: f64,
    pub gw: f64,
    pub od: f64,
    pub penalty: f64,
}

impl CostRates {
    pub fn total(&self) -> f64 {
        self.fd_serving + self.fd_relocation + self.gw + self.od + self.penalty
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidSolution {
    pub n_fd: u32,
    pub n_gw: u32,
    pub n_od: u32,
    pub t: usize,
    /// Request arrival rates used for this solve.
    pub lambda: Vec<f64>,
    pub a_fd: Vec<f64>,
    /// Shares of zone-`i` demand sent on route `(i, j)` to each option;
    /// `P_ij a_fd_i + a_gw_ij + a_od_ij + a_null_ij = P_ij`.
    pub a_gw: Vec<Vec<f64>>,
    pub a_od: Vec<Vec<f64>>,
    pub a_null: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
    /// Unused GW and OD capacity per route (requests/h).
    pub gw_slack: Vec<Vec<f64>>,
    pub od_slack: Vec<Vec<f64>>,
    pub cost_rate: f64,
    pub rates: CostRates,
}

/// Compact per-state result kept in the cache.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpsSummary {
    pub cost_rate: f64,
    pub rates: CostRates,
    pub service_level: f64,
    pub unmatched_gw: f64,
    pub unmatched_od: f64,
}

/// `C_ops` per strategic step for a given cost rate.
pub fn rate_to_step_cost(inst: &Instance, rate: f64) -> f64 {
    rate * inst.strategic.hours_per_ops_horizon() * inst.strategic.k_horizons as f64
}

fn relocation_price(inst: &Instance, i: usize, j: usize) -> f64 {
    let c = inst.costs.fd_per_km * inst.distance_km[i][j];
    match inst.costs.relocation {
        RelocationCost::TravelRate => c,
        RelocationCost::Strict => c / inst.mu(i, j),
    }
}

// ---------------------------------------------------------------------------
// Fraction form

/// Variable positions of the fraction-form LP.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidIndex {
    pub zones: usize,
}

impl FluidIndex {
    pub fn num_vars(&self) -> usize {
        self.zones + 5 * self.zones * self.zones
    }
    pub fn a_fd(&self, i: usize) -> usize {
        i
    }
    fn block(&self, b: usize, i: usize, j: usize) -> usize {
        let m = self.zones;
        m + b * m * m + i * m + j
    }
    pub fn a_gw(&self, i: usize, j: usize) -> usize {
        self.block(0, i, j)
    }
    pub fn a_od(&self, i: usize, j: usize) -> usize {
        self.block(1, i, j)
    }
    pub fn a_null(&self, i: usize, j: usize) -> usize {
        self.block(2, i, j)
    }
    pub fn e(&self, i: usize, j: usize) -> usize {
        self.block(3, i, j)
    }
    pub fn f(&self, i: usize, j: usize) -> usize {
        self.block(4, i, j)
    }
}

#[derive(Debug, Clone)]
pub struct FluidLp {
    pub lp: LpProblem,
    pub index: FluidIndex,
    /// Origins without demand; their matching rows are dropped and their fractions fixed to 0.
    pub degenerate_zones: Vec<usize>,
}

/// Fraction-form fluid LP for `n_fd >= 1`.
///
/// Matching is balanced per route: `P_ij a_i + a_gw_ij + a_od_ij + a_null_ij = P_ij`.
/// Summed over `j` this is the per-origin balance; per route it keeps the
/// outsourced share of a route within that route's demand.
pub fn build_fluid_lp(inst: &Instance, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> Result<FluidLp, FluidError> {
    if n_fd == 0 {
        return Err(FluidError::NoFixedDrivers);
    }
    let m = inst.zones;
    let lambda = inst.demand_rates(t)?;
    let (lgw, lod) = inst.cd_arrival_rates(n_gw, n_od);
    let costs = inst.cost_matrices();
    let pr = &inst.request_pattern;
    let pgw = inst.gw_pattern();
    let pod = inst.od_pattern();
    let n = n_fd as f64;
    let idx = FluidIndex { zones: m };
    let mut lp = LpProblem::new(idx.num_vars());
    let mut degenerate = Vec::new();

    for i in 0..m {
        let li = lambda[i];
        let live = li > 0.0;
        if !live {
            degenerate.push(i);
        }
        lp.var_bounds[idx.a_fd(i)] = (0.0, if live { 1.0 } else { 0.0 });
        let fd_route_cost: f64 = (0..m).map(|j| costs.fd[i][j] * pr[i][j]).sum();
        lp.objective[idx.a_fd(i)] = li * fd_route_cost;
        for j in 0..m {
            let (gw_cap, od_cap) =
                if live { (pr[i][j].min(lgw[i] * pgw[i][j] / li), pr[i][j].min(lod[i] * pod[i][j] / li)) } else { (0.0, 0.0) };
            lp.var_bounds[idx.a_gw(i, j)] = (0.0, gw_cap);
            lp.var_bounds[idx.a_od(i, j)] = (0.0, od_cap);
            lp.var_bounds[idx.a_null(i, j)] = (0.0, if live { 1.0 } else { 0.0 });
            lp.var_bounds[idx.e(i, j)] = (0.0, 1.0);
            lp.var_bounds[idx.f(i, j)] = (0.0, 1.0);
            lp.objective[idx.a_gw(i, j)] = li * costs.gw[i][j];
            lp.objective[idx.a_od(i, j)] = li * costs.od[i][j];
            lp.objective[idx.a_null(i, j)] = li * costs.penalty[i][j];
            if i != j {
                lp.objective[idx.e(i, j)] = relocation_price(inst, i, j) * inst.mu(i, j) * n;
            }
        }
    }

    // Little's law for serving FDs.
    for i in 0..m {
        for j in 0..m {
            lp.add_constraint(vec![(idx.a_fd(i), lambda[i] / n * pr[i][j]), (idx.f(i, j), -inst.mu(i, j))], Relation::Eq, 0.0);
        }
    }
    // Relocation out of i toward j is bounded by served arrivals at i.
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let mut terms = vec![(idx.e(i, j), inst.mu(i, j))];
            terms.extend((0..m).map(|k| (idx.f(k, i), -inst.mu(k, i))));
            lp.add_constraint(terms, Relation::Le, 0.0);
        }
    }
    // Total flow bounds at each zone.
    for i in 0..m {
        let inflow_e: Vec<(usize, f64)> = (0..m).filter(|&k| k != i).map(|k| (idx.e(k, i), inst.mu(k, i))).collect();
        let inflow_f: Vec<(usize, f64)> = (0..m).map(|k| (idx.f(k, i), inst.mu(k, i))).collect();
        let dispatch = (idx.a_fd(i), lambda[i] / n);

        let mut lower = inflow_e.clone();
        lower.push((dispatch.0, -dispatch.1));
        lp.add_constraint(lower, Relation::Le, 0.0);

        let mut upper = vec![dispatch];
        upper.extend(inflow_e.iter().map(|&(v, c)| (v, -c)));
        upper.extend(inflow_f.iter().map(|&(v, c)| (v, -c)));
        lp.add_constraint(upper, Relation::Le, 0.0);

        let mut balance = vec![dispatch];
        balance.extend((0..m).filter(|&j| j != i).map(|j| (idx.e(i, j), inst.mu(i, j))));
        balance.extend(inflow_e.iter().map(|&(v, c)| (v, -c)));
        balance.extend(inflow_f.iter().map(|&(v, c)| (v, -c)));
        lp.add_constraint(balance, Relation::Eq, 0.0);
    }
    // Route-level matching balance.
    for i in 0..m {
        if lambda[i] <= 0.0 {
            continue;
        }
        for j in 0..m {
            lp.add_constraint(
                vec![(idx.a_fd(i), pr[i][j]), (idx.a_gw(i, j), 1.0), (idx.a_od(i, j), 1.0), (idx.a_null(i, j), 1.0)],
                Relation::Eq,
                pr[i][j],
            );
        }
    }
    // Fluid stocks account for the whole fleet.
    let mut all = Vec::with_capacity(2 * m * m);
    for i in 0..m {
        for j in 0..m {
            all.push((idx.e(i, j), 1.0));
            all.push((idx.f(i, j), 1.0));
        }
    }
    lp.add_constraint(all, Relation::Eq, 1.0);

    Ok(FluidLp { lp, index: idx, degenerate_zones: degenerate })
}

/// Solves the fraction-form LP and unpacks it.
pub fn solve_fraction_form(inst: &Instance, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> Result<(FluidSolution, LpSolution), FluidError> {
    let model = build_fluid_lp(inst, n_fd, n_gw, n_od, t)?;
    let sol = crate::lp::solve(&model.lp, 1e-9)?;
    if sol.status != LpStatus::Optimal {
        return Err(FluidError::Status(sol.status));
    }
    let m = inst.zones;
    let idx = &model.index;
    let x = &sol.primal;
    let mat = |g: &dyn Fn(usize, usize) -> usize| -> Vec<Vec<f64>> { (0..m).map(|i| (0..m).map(|j| x[g(i, j)]).collect()).collect() };
    let lambda = inst.demand_rates(t)?;
    let fluid = finish_solution(
        inst,
        (n_fd, n_gw, n_od, t),
        lambda,
        (0..m).map(|i| x[idx.a_fd(i)]).collect(),
        mat(&|i, j| idx.a_gw(i, j)),
        mat(&|i, j| idx.a_od(i, j)),
        mat(&|i, j| idx.a_null(i, j)),
        mat(&|i, j| idx.e(i, j)),
        mat(&|i, j| idx.f(i, j)),
    );
    Ok((fluid, sol))
}

#[allow(clippy::too_many_arguments)]
fn finish_solution(
    inst: &Instance,
    state: (u32, u32, u32, usize),
    lambda: Vec<f64>,
    a_fd: Vec<f64>,
    a_gw: Vec<Vec<f64>>,
    a_od: Vec<Vec<f64>>,
    a_null: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
) -> FluidSolution {
    let (n_fd, n_gw, n_od, t) = state;
    let m = inst.zones;
    let costs = inst.cost_matrices();
    let pr = &inst.request_pattern;
    let (lgw, lod) = inst.cd_arrival_rates(n_gw, n_od);
    let pgw = inst.gw_pattern();
    let pod = inst.od_pattern();
    let mut rates = CostRates::default();
    let mut gw_slack = vec![vec![0.0; m]; m];
    let mut od_slack = vec![vec![0.0; m]; m];
    let n = n_fd as f64;
    for i in 0..m {
        for j in 0..m {
            let li = lambda[i];
            rates.fd_serving += li * pr[i][j] * a_fd[i] * costs.fd[i][j];
            rates.gw += li * a_gw[i][j] * costs.gw[i][j];
            rates.od += li * a_od[i][j] * costs.od[i][j];
            rates.penalty += li * a_null[i][j] * costs.penalty[i][j];
            if i != j {
                rates.fd_relocation += relocation_price(inst, i, j) * inst.mu(i, j) * n * e[i][j];
            }
            gw_slack[i][j] = (lgw[i] * pgw[i][j] - li * a_gw[i][j]).max(0.0);
            od_slack[i][j] = (lod[i] * pod[i][j] - li * a_od[i][j]).max(0.0);
        }
    }
    FluidSolution { n_fd, n_gw, n_od, t, lambda, a_fd, a_gw, a_od, a_null, e, f, gw_slack, od_slack, cost_rate: rates.total(), rates }
}

// ---------------------------------------------------------------------------
// Analytic outsourcing

#[derive(Debug, Clone, PartialEq)]
pub struct OutsourcingPlan {
    /// FD serving cost at the given coverage ($/h).
    pub fd_serving: f64,
    /// GW, OD and penalty cost of the residual demand ($/h).
    pub outsourcing: f64,
    pub a_gw: Vec<Vec<f64>>,
    pub a_od: Vec<Vec<f64>>,
    pub a_null: Vec<Vec<f64>>,
    pub rates: CostRates,
}

impl OutsourcingPlan {
    /// Serving plus outsourcing cost; excludes FD relocation.
    pub fn total(&self) -> f64 {
        self.fd_serving + self.outsourcing
    }
}

/// Assigns the demand left over by FD coverage `a_fd` route by route: the
/// cheaper crowd option first (GW on ties), then the other, then the penalty.
pub fn analytic_penalty(inst: &Instance, a_fd: &[f64], n_gw: u32, n_od: u32, t: usize) -> Result<OutsourcingPlan, FluidError> {
    let m = inst.zones;
    let lambda = inst.demand_rates(t)?;
    let (lgw, lod) = inst.cd_arrival_rates(n_gw, n_od);
    let costs = inst.cost_matrices();
    let pr = &inst.request_pattern;
    let pgw = inst.gw_pattern();
    let pod = inst.od_pattern();
    let mut a_gw = vec![vec![0.0; m]; m];
    let mut a_od = vec![vec![0.0; m]; m];
    let mut a_null = vec![vec![0.0; m]; m];
    let mut rates = CostRates::default();
    for i in 0..m {
        let li = lambda[i];
        if li <= 0.0 {
            continue;
        }
        for j in 0..m {
            rates.fd_serving += li * pr[i][j] * a_fd[i] * costs.fd[i][j];
            let mut residual = li * pr[i][j] * (1.0 - a_fd[i]);
            if residual <= 0.0 {
                continue;
            }
            let gw_first = costs.gw[i][j] <= costs.od[i][j];
            let order = if gw_first { [0, 1] } else { [1, 0] };
            for option in order {
                let cap = if option == 0 { lgw[i] * pgw[i][j] } else { lod[i] * pod[i][j] };
                let take = residual.min(cap);
                if take <= 0.0 {
                    continue;
                }
                residual -= take;
                if option == 0 {
                    a_gw[i][j] = take / li;
                    rates.gw += take * costs.gw[i][j];
                } else {
                    a_od[i][j] = take / li;
                    rates.od += take * costs.od[i][j];
                }
            }
            a_null[i][j] = residual / li;
            rates.penalty += residual * costs.penalty[i][j];
        }
    }
    Ok(OutsourcingPlan { fd_serving: rates.fd_serving, outsourcing: rates.gw + rates.od + rates.penalty, a_gw, a_od, a_null, rates })
}

// ---------------------------------------------------------------------------
// Metrics

/// Share of arriving requests that are served. 1 when there is no demand.
pub fn service_level(sol: &FluidSolution, lambda: &[f64], pr: &[Vec<f64>]) -> f64 {
    let total: f64 = lambda.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    // `a_null` is a share of zone demand; the per-route unmatched fraction is `a_null / P_ij`.
    let lost: f64 = (0..lambda.len())
        .map(|i| (0..lambda.len()).filter(|&j| pr[i][j] > 0.0).map(|j| lambda[i] * pr[i][j] * (sol.a_null[i][j] / pr[i][j])).sum::<f64>())
        .sum();
    (1.0 - lost / total).clamp(0.0, 1.0)
}

/// Shares of unmatched GWs and ODs: total slack converted to driver arrivals
/// (`slack / zeta`) over the fleet size; 0 for an empty fleet.
pub fn unmatched_cd_shares(inst: &Instance, sol: &FluidSolution) -> (f64, f64) {
    let share = |slack: &[Vec<f64>], n: u32, zeta: f64| {
        if n == 0 {
            return 0.0;
        }
        let s: f64 = slack.iter().flatten().sum();
        (s / (zeta * n as f64)).clamp(0.0, 1.0)
    };
    (share(&sol.gw_slack, sol.n_gw, inst.gw.active_share), share(&sol.od_slack, sol.n_od, inst.od.active_share))
}

fn unmatched_rate(sol: &FluidSolution) -> f64 {
    let m = sol.lambda.len();
    (0..m).map(|i| sol.lambda[i] * sol.a_null[i].iter().sum::<f64>()).sum()
}

// ---------------------------------------------------------------------------
// Rate form with warm starts and cached cost curves

#[derive(Debug, Clone)]
struct RateLayout {
    s: Vec<usize>,
    /// Routes with positive request probability: (i, j, g, o, u, coverage row).
    routes: Vec<(usize, usize, usize, usize, usize, usize)>,
    /// Relocation arcs: (i, j, variable).
    reloc: Vec<(usize, usize, usize)>,
    fleet_row: usize,
}

fn build_rate_lp(inst: &Instance) -> (LpProblem, RateLayout) {
    let m = inst.zones;
    let pr = &inst.request_pattern;
    let costs = inst.cost_matrices();
    let s: Vec<usize> = (0..m).collect();
    let mut next = m;
    let mut routes = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if pr[i][j] > 0.0 {
                routes.push((i, j, next, next + 1, next + 2, 0));
                next += 3;
            }
        }
    }
    let mut reloc = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if i != j {
                reloc.push((i, j, next));
                next += 1;
            }
        }
    }
    let mut lp = LpProblem::new(next);
    for i in 0..m {
        lp.objective[s[i]] = (0..m).map(|j| pr[i][j] * costs.fd[i][j]).sum();
    }
    for r in routes.iter_mut() {
        let (i, j, g, o, u, _) = *r;
        lp.objective[g] = costs.gw[i][j];
        lp.objective[o] = costs.od[i][j];
        lp.objective[u] = costs.penalty[i][j];
        r.5 = lp.add_constraint(vec![(s[i], pr[i][j]), (g, 1.0), (o, 1.0), (u, 1.0)], Relation::Eq, 0.0);
    }
    for &(i, j, v) in &reloc {
        lp.objective[v] = relocation_price(inst, i, j);
    }
    // Flow balance: dispatches plus relocations out equal relocations in plus served arrivals.
    for i in 0..m {
        let mut terms = vec![(s[i], 1.0)];
        for &(a, b, v) in &reloc {
            if a == i {
                terms.push((v, 1.0));
            }
            if b == i {
                terms.push((v, -1.0));
            }
        }
        for k in 0..m {
            if pr[k][i] > 0.0 {
                terms.push((s[k], -pr[k][i]));
            }
        }
        lp.add_constraint(terms, Relation::Eq, 0.0);
    }
    // Relocations into i never exceed dispatches from i.
    for i in 0..m {
        let mut terms: Vec<(usize, f64)> = reloc.iter().filter(|r| r.1 == i).map(|r| (r.2, 1.0)).collect();
        terms.push((s[i], -1.0));
        lp.add_constraint(terms, Relation::Le, 0.0);
    }
    // Relocations out of i toward each j are bounded by served arrivals at i.
    for &(i, _, v) in &reloc {
        let mut terms = vec![(v, 1.0)];
        for k in 0..m {
            if pr[k][i] > 0.0 {
                terms.push((s[k], -pr[k][i]));
            }
        }
        lp.add_constraint(terms, Relation::Le, 0.0);
    }
    // Busy drivers never exceed the fleet.
    let mut terms: Vec<(usize, f64)> =
        (0..m).map(|i| (s[i], (0..m).filter(|&j| pr[i][j] > 0.0).map(|j| pr[i][j] / inst.mu(i, j)).sum())).collect();
    terms.extend(reloc.iter().map(|&(i, j, v)| (v, 1.0 / inst.mu(i, j))));
    let fleet_row = lp.add_constraint(terms, Relation::Le, 0.0);
    (lp, RateLayout { s, routes, reloc, fleet_row })
}

/// Convex piecewise-linear operational cost rate over the FD count for one
/// crowd fleet and step.
#[derive(Debug, Clone, PartialEq)]
pub struct OpsCurve {
    pub points: Vec<RhsBreakpoint>,
}

impl OpsCurve {
    /// Cost rate at fleet size `n` ($/h).
    pub fn rate(&self, n: f64) -> f64 {
        let pts = &self.points;
        let k = pts.partition_point(|p| p.rhs <= n);
        if k == 0 {
            return pts[0].objective;
        }
        let a = &pts[k - 1];
        if k == pts.len() {
            return a.objective + a.slope.min(0.0) * (n - a.rhs);
        }
        let b = &pts[k];
        if b.rhs <= a.rhs {
            return a.objective;
        }
        a.objective + (b.objective - a.objective) * (n - a.rhs) / (b.rhs - a.rhs)
    }
}

type CurveKey = (u32, u32, usize);
type StateKey = (u32, u32, u32, usize);

/// Operational-cost oracle for one instance: warm-started solves, exact cost
/// curves along the FD axis, and caches keyed by the exact state.
pub struct OpsModel {
    inst: Instance,
    layout: RateLayout,
    /// Solved reference engine; every query starts from a clone so results do
    /// not depend on the order of earlier queries.
    base: WarmSimplex,
    curves: Mutex<HashMap<CurveKey, Arc<OpsCurve>>>,
    summaries: Mutex<HashMap<StateKey, OpsSummary>>,
    full_service: Mutex<HashMap<CurveKey, u32>>,
    sweep_to: f64,
}

impl std::fmt::Debug for OpsModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpsModel").field("instance", &self.inst.name).finish_non_exhaustive()
    }
}

impl OpsModel {
    pub fn new(inst: &Instance) -> Result<Self, FluidError> {
        let (lp, layout) = build_rate_lp(inst);
        let engine = WarmSimplex::new(&lp, SimplexOptions::default())?;
        let reference = inst.strategic.initial;
        let total_max = (0..=inst.strategic.horizon).map(|t| inst.demand_total(t).unwrap_or(0.0)).fold(0.0f64, f64::max);
        let sweep_to = (inst.strategic.caps.fd as f64).max(full_service_cap(inst, total_max) as f64);
        let mut model = Self {
            inst: inst.clone(),
            layout,
            base: engine,
            curves: Mutex::new(HashMap::new()),
            summaries: Mutex::new(HashMap::new()),
            full_service: Mutex::new(HashMap::new()),
            sweep_to,
        };
        let mut base = model.base.clone();
        model.load(&mut base, reference.gw, reference.od, inst.strategic.horizon)?;
        base.solve()?;
        model.base = base;
        Ok(model)
    }

    pub fn instance(&self) -> &Instance {
        &self.inst
    }

    fn load(&self, engine: &mut WarmSimplex, n_gw: u32, n_od: u32, t: usize) -> Result<Vec<f64>, FluidError> {
        let inst = &self.inst;
        let lambda = inst.demand_rates(t)?;
        let (lgw, lod) = inst.cd_arrival_rates(n_gw, n_od);
        let pr = &inst.request_pattern;
        let pgw = inst.gw_pattern();
        let pod = inst.od_pattern();
        for (i, &v) in self.layout.s.iter().enumerate() {
            engine.set_bounds(v, 0.0, lambda[i]);
        }
        for &(i, j, g, o, _, row) in &self.layout.routes {
            let demand = lambda[i] * pr[i][j];
            engine.set_rhs(row, demand);
            engine.set_bounds(g, 0.0, demand.min(lgw[i] * pgw[i][j]));
            engine.set_bounds(o, 0.0, demand.min(lod[i] * pod[i][j]));
        }
        Ok(lambda)
    }

    /// Cost-rate curve over the FD count, traced once per `(n_gw, n_od, t)`.
    pub fn curve(&self, n_gw: u32, n_od: u32, t: usize) -> Result<Arc<OpsCurve>, FluidError> {
        let key = (n_gw, n_od, t);
        if let Some(c) = self.curves.lock().expect("curve cache").get(&key) {
            return Ok(c.clone());
        }
        let points = {
            let mut engine = self.base.clone();
            self.load(&mut engine, n_gw, n_od, t)?;
            engine.sweep_rhs(self.layout.fleet_row, 0.0, self.sweep_to)?
        };
        let curve = Arc::new(OpsCurve { points });
        self.curves.lock().expect("curve cache").insert(key, curve.clone());
        Ok(curve)
    }

    /// Operational cost rate ($/h). The empty FD fleet is priced analytically.
    pub fn cost_rate(&self, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> Result<f64, FluidError> {
        if n_fd == 0 {
            let zero = vec![0.0; self.inst.zones];
            return Ok(analytic_penalty(&self.inst, &zero, n_gw, n_od, t)?.total());
        }
        if (n_fd as f64) > self.sweep_to {
            return Ok(self.solve(n_fd, n_gw, n_od, t)?.cost_rate);
        }
        Ok(self.curve(n_gw, n_od, t)?.rate(n_fd as f64))
    }

    /// `C_ops` for one strategic step ($).
    pub fn ops_cost(&self, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> Result<f64, FluidError> {
        Ok(rate_to_step_cost(&self.inst, self.cost_rate(n_fd, n_gw, n_od, t)?))
    }

    /// Full solution at one state.
    pub fn solve(&self, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> Result<FluidSolution, FluidError> {
        let inst = &self.inst;
        let m = inst.zones;
        if n_fd == 0 {
            let zero = vec![0.0; m];
            let plan = analytic_penalty(inst, &zero, n_gw, n_od, t)?;
            let lambda = inst.demand_rates(t)?;
            return Ok(finish_solution(
                inst,
                (0, n_gw, n_od, t),
                lambda,
                zero,
                plan.a_gw,
                plan.a_od,
                plan.a_null,
                vec![vec![0.0; m]; m],
                vec![vec![0.0; m]; m],
            ));
        }
        let (lambda, sol) = {
            let mut engine = self.base.clone();
            let lambda = self.load(&mut engine, n_gw, n_od, t)?;
            engine.set_rhs(self.layout.fleet_row, n_fd as f64);
            (lambda, engine.solve()?)
        };
        if sol.status != LpStatus::Optimal {
            return Err(FluidError::Status(sol.status));
        }
        Ok(self.unpack(&lambda, &sol.primal, (n_fd, n_gw, n_od, t)))
    }

    fn unpack(&self, lambda: &[f64], x: &[f64], state: (u32, u32, u32, usize)) -> FluidSolution {
        let inst = &self.inst;
        let m = inst.zones;
        let n = state.0 as f64;
        let pr = &inst.request_pattern;
        let frac = |v: f64, li: f64| if li > 0.0 { (v / li).max(0.0) } else { 0.0 };
        let a_fd: Vec<f64> = (0..m).map(|i| frac(x[self.layout.s[i]], lambda[i]).min(1.0)).collect();
        let mut a_gw = vec![vec![0.0; m]; m];
        let mut a_od = vec![vec![0.0; m]; m];
        let mut a_null = vec![vec![0.0; m]; m];
        for &(i, j, g, o, u, _) in &self.layout.routes {
            a_gw[i][j] = frac(x[g], lambda[i]);
            a_od[i][j] = frac(x[o], lambda[i]);
            a_null[i][j] = frac(x[u], lambda[i]);
        }
        let mut f = vec![vec![0.0; m]; m];
        let mut e = vec![vec![0.0; m]; m];
        let mut busy = 0.0;
        for i in 0..m {
            for j in 0..m {
                if pr[i][j] > 0.0 {
                    f[i][j] = x[self.layout.s[i]].max(0.0) * pr[i][j] / (n * inst.mu(i, j));
                    busy += f[i][j];
                }
            }
        }
        for &(i, j, v) in &self.layout.reloc {
            e[i][j] = x[v].max(0.0) / (n * inst.mu(i, j));
            busy += e[i][j];
        }
        let idle = (1.0 - busy).max(0.0);
        let inflow: Vec<f64> = (0..m).map(|i| (0..m).map(|k| x[self.layout.s[k]].max(0.0) * pr[k][i]).sum::<f64>()).collect();
        let total_in: f64 = inflow.iter().sum();
        for i in 0..m {
            e[i][i] = if total_in > 0.0 { idle * inflow[i] / total_in } else { idle / m as f64 };
        }
        finish_solution(inst, state, lambda.to_vec(), a_fd, a_gw, a_od, a_null, e, f)
    }

    /// Cached per-state summary used by rollouts.
    pub fn summary(&self, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> Result<OpsSummary, FluidError> {
        let key = (n_fd, n_gw, n_od, t);
        if let Some(s) = self.summaries.lock().expect("summary cache").get(&key) {
            return Ok(*s);
        }
        let sol = self.solve(n_fd, n_gw, n_od, t)?;
        let (unmatched_gw, unmatched_od) = unmatched_cd_shares(&self.inst, &sol);
        let summary = OpsSummary {
            cost_rate: sol.cost_rate,
            rates: sol.rates,
            service_level: service_level(&sol, &sol.lambda, &self.inst.request_pattern),
            unmatched_gw,
            unmatched_od,
        };
        self.summaries.lock().expect("summary cache").insert(key, summary);
        Ok(summary)
    }

    /// Smallest FD count whose fluid solution leaves at most `1e-6` of demand unmatched.
    pub fn min_fd_full_service(&self, n_gw: u32, n_od: u32, t: usize) -> Result<u32, FluidError> {
        let key = (n_gw, n_od, t);
        if let Some(&n) = self.full_service.lock().expect("full-service cache").get(&key) {
            return Ok(n);
        }
        let lambda = self.inst.demand_rates(t)?;
        let total: f64 = lambda.iter().sum();
        let tol = 1e-6 * total;
        // One engine for the whole search so probes warm-start from each other.
        let mut engine = self.base.clone();
        self.load(&mut engine, n_gw, n_od, t)?;
        let mut served = |n: u32| -> Result<bool, FluidError> {
            let sol = if n == 0 {
                self.solve(0, n_gw, n_od, t)?
            } else {
                engine.set_rhs(self.layout.fleet_row, n as f64);
                let lp = engine.solve()?;
                if lp.status != LpStatus::Optimal {
                    return Err(FluidError::Status(lp.status));
                }
                self.unpack(&lambda, &lp.primal, (n, n_gw, n_od, t))
            };
            Ok(unmatched_rate(&sol) <= tol)
        };
        let found = if served(0)? {
            0
        } else {
            let cap = full_service_cap(&self.inst, total);
            let mut lo = 0u64;
            let mut hi = 1u64;
            while !served(hi as u32)? {
                lo = hi;
                hi *= 2;
                if hi > cap {
                    if served(cap as u32)? {
                        hi = cap;
                        break;
                    }
                    return Err(FluidError::Unreachable(cap));
                }
            }
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if served(mid as u32)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi as u32
        };
        self.full_service.lock().expect("full-service cache").insert(key, found);
        Ok(found)
    }

    /// Relocation cost rate of the LP optimum at a state ($/h).
    pub fn relocation_rate(&self, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> Result<f64, FluidError> {
        Ok(self.solve(n_fd, n_gw, n_od, t)?.rates.fd_relocation)
    }
}

fn full_service_cap(inst: &Instance, total_demand: f64) -> u64 {
    let m = inst.zones;
    let min_mu = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| inst.mu(i, j)).fold(f64::INFINITY, f64::min);
    10 * ((total_demand / min_mu).ceil() as u64).max(1)
}

/// One-shot `C_ops` with its solution. Callers evaluating many states should
/// keep an [`OpsModel`] instead.
pub fn ops_cost(inst: &Instance, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> Result<(f64, FluidSolution), FluidError> {
    let model = OpsModel::new(inst)?;
    let sol = model.solve(n_fd, n_gw, n_od, t)?;
    Ok((rate_to_step_cost(inst, sol.cost_rate), sol))
}
