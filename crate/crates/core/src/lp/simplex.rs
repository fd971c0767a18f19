use super::{LpError, LpProblem, LpSolution, LpStatus, Relation};

#[derive(Debug, Clone)]
pub struct SimplexOptions {
    /// Bound tolerance on the returned primal point.
    pub bound_tol: f64,
    /// Row feasibility tolerance (unscaled).
    pub row_tol: f64,
    /// Reduced-cost optimality tolerance (scaled problem).
    pub opt_tol: f64,
    /// Smallest pivot magnitude accepted in ratio tests.
    pub pivot_tol: f64,
    /// Pivots between fresh factorizations of the basis.
    pub refactor_every: usize,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub bland_after: usize,
    pub max_iterations: usize,
    pub scale: bool,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            bound_tol: 1e-9,
            row_tol: 1e-7,
            opt_tol: 1e-9,
            pivot_tol: 1e-10,
            refactor_every: 50,
            bland_after: 100,
            max_iterations: usize::MAX,
            scale: true,
        }
    }
}

/// Start of one linear piece of a right-hand-side sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhsBreakpoint {
    pub rhs: f64,
    pub objective: f64,
    /// Derivative of the optimal value to the right of `rhs`.
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Basic,
    Lower,
    Upper,
    /// Nonbasic free variable held at zero.
    Free,
}

// Scaled working tolerances for primal feasibility and zero tests.
const FEAS_TOL: f64 = 1e-10;
const DEGENERATE_STEP: f64 = 1e-12;

/// Simplex engine that keeps its basis between solves.
///
/// Columns are laid out as `[structural | slack | artificial]`. Row `i` reads
/// `a_i x + s_i = b_i`, so a `<=` row has `s_i in [0, inf)`, a `>=` row
/// `s_i in (-inf, 0]` and an equality row `s_i = 0`. Artificial columns are
/// only unlocked during phase 1 of a cold start.
#[derive(Debug, Clone)]
pub struct WarmSimplex {
    opts: SimplexOptions,
    m: usize,
    n: usize,
    cols: Vec<Vec<(usize, f64)>>,
    cost: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    b: Vec<f64>,
    row_scale: Vec<f64>,
    col_scale: Vec<f64>,
    art_sign: Vec<f64>,
    status: Vec<Status>,
    x: Vec<f64>,
    basis: Vec<usize>,
    binv: Vec<f64>,
    since_refactor: usize,
    /// Whether the current basis is optimal for the last solved data.
    warm: bool,
    iterations: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
    Limit,
}

impl WarmSimplex {
    pub fn new(lp: &LpProblem, opts: SimplexOptions) -> Result<Self, LpError> {
        lp.validate()?;
        let m = lp.constraints.len();
        let n = lp.num_vars;

        let mut raw: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, row) in lp.constraints.iter().enumerate() {
            for &(j, a) in &row.terms {
                if a == 0.0 {
                    continue;
                }
                match raw[j].last_mut() {
                    Some((r, v)) if *r == i => *v += a,
                    _ => raw[j].push((i, a)),
                }
            }
        }
        for col in raw.iter_mut() {
            col.sort_by_key(|&(i, _)| i);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(col.len());
            for &(i, a) in col.iter() {
                match merged.last_mut() {
                    Some((r, v)) if *r == i => *v += a,
                    _ => merged.push((i, a)),
                }
            }
            merged.retain(|&(_, a)| a != 0.0);
            *col = merged;
        }

        let (row_scale, col_scale) = if opts.scale { geometric_scaling(&raw, m) } else { (vec![1.0; m], vec![1.0; n]) };

        let total = n + 2 * m;
        let mut cols = Vec::with_capacity(n);
        for (j, col) in raw.iter().enumerate() {
            cols.push(col.iter().map(|&(i, a)| (i, a * row_scale[i] * col_scale[j])).collect());
        }
        let mut cost = vec![0.0; total];
        let mut lo = vec![0.0; total];
        let mut hi = vec![0.0; total];
        for j in 0..n {
            cost[j] = lp.objective[j] * col_scale[j];
            let (l, h) = lp.var_bounds[j];
            lo[j] = l / col_scale[j];
            hi[j] = h / col_scale[j];
        }
        let mut b = vec![0.0; m];
        for (i, row) in lp.constraints.iter().enumerate() {
            b[i] = row.rhs * row_scale[i];
            let (l, h) = match row.relation {
                Relation::Le => (0.0, f64::INFINITY),
                Relation::Ge => (f64::NEG_INFINITY, 0.0),
                Relation::Eq => (0.0, 0.0),
            };
            lo[n + i] = l;
            hi[n + i] = h;
        }

        Ok(Self {
            opts,
            m,
            n,
            cols,
            cost,
            lo,
            hi,
            b,
            row_scale,
            col_scale,
            art_sign: vec![1.0; m],
            status: vec![Status::Lower; total],
            x: vec![0.0; total],
            basis: Vec::new(),
            binv: Vec::new(),
            since_refactor: 0,
            warm: false,
            iterations: 0,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_rows(&self) -> usize {
        self.m
    }

    /// Replaces the right-hand side of row `i`.
    pub fn set_rhs(&mut self, i: usize, rhs: f64) {
        self.b[i] = rhs * self.row_scale[i];
    }

    /// Replaces the box of structural variable `j`.
    pub fn set_bounds(&mut self, j: usize, lo: f64, hi: f64) {
        assert!(lo <= hi, "variable {j}: lower bound {lo} above upper bound {hi}");
        let s = self.col_scale[j];
        let (nl, nh) = (lo / s, hi / s);
        // A nonbasic variable whose bound disappears cannot stay dual feasible
        // without a primal pass; drop the warm basis in that case.
        match self.status[j] {
            Status::Lower if !nl.is_finite() => self.warm = false,
            Status::Upper if !nh.is_finite() => self.warm = false,
            _ => {}
        }
        self.lo[j] = nl;
        self.hi[j] = nh;
    }

    /// Solves with the current data, reusing the last optimal basis when possible.
    pub fn solve(&mut self) -> Result<LpSolution, LpError> {
        self.iterations = 0;
        if self.warm {
            match self.dual_resolve()? {
                Some(sol) => return Ok(sol),
                None => self.warm = false,
            }
        }
        self.cold_solve()
    }

    /// Traces the optimal value as a function of the right-hand side of `row`
    /// over `[from, to]`. The value is convex and piecewise linear in the rhs;
    /// each breakpoint carries the slope valid up to the next one.
    pub fn sweep_rhs(&mut self, row: usize, from: f64, to: f64) -> Result<Vec<RhsBreakpoint>, LpError> {
        assert!(from <= to, "sweep range is empty");
        self.set_rhs(row, from);
        let start = self.solve()?;
        if start.status != LpStatus::Optimal {
            return Err(LpError::Numerical(format!("sweep start is {:?}", start.status)));
        }
        let m = self.m;
        let rs = self.row_scale[row];
        let mut p = from;
        let mut out = vec![RhsBreakpoint { rhs: p, objective: self.objective_now(), slope: self.row_dual(row) }];
        let mut guard = 0usize;
        loop {
            guard += 1;
            if guard > self.opts.max_iterations.min(1_000_000) {
                let partial = self.finish(LpStatus::Optimal);
                return Err(LpError::IterationLimit { partial: Box::new(partial) });
            }
            let dir: Vec<f64> = (0..m).map(|i| self.binv[i * m + row] * rs).collect();
            let mut leave: Option<(usize, bool, f64, f64)> = None;
            for (i, &d) in dir.iter().enumerate() {
                if d.abs() <= 1e-13 {
                    continue;
                }
                let k = self.basis[i];
                let (limit, below) = if d < 0.0 {
                    if !self.lo[k].is_finite() {
                        continue;
                    }
                    (((self.x[k] - self.lo[k]) / -d).max(0.0), true)
                } else {
                    if !self.hi[k].is_finite() {
                        continue;
                    }
                    (((self.hi[k] - self.x[k]) / d).max(0.0), false)
                };
                let take = match leave {
                    None => true,
                    Some((_, _, best, best_d)) => limit < best - 1e-12 || (limit <= best + 1e-12 && d.abs() > best_d),
                };
                if take {
                    leave = Some((i, below, limit, d.abs()));
                }
            }
            let step = leave.map_or(f64::INFINITY, |l| l.2);
            let advance = step.min(to - p);
            for (i, &d) in dir.iter().enumerate() {
                let k = self.basis[i];
                self.x[k] += d * advance;
            }
            p += advance;
            self.b[row] = p * rs;
            if p >= to || leave.is_none() {
                self.b[row] = to * rs;
                self.recompute_basic_values();
                let last = RhsBreakpoint { rhs: to, objective: self.objective_now(), slope: self.row_dual(row) };
                if out.last().is_none_or(|b| b.rhs < to) {
                    out.push(last);
                }
                self.warm = true;
                return Ok(out);
            }
            let (r, below, _, _) = leave.expect("leaving row");
            let k = self.basis[r];
            self.x[k] = if below { self.lo[k] } else { self.hi[k] };
            let Some(q) = self.dual_entering(r, below, false) else {
                // Beyond `p` the problem has no feasible point.
                self.warm = true;
                out.push(RhsBreakpoint { rhs: p, objective: self.objective_now(), slope: f64::NAN });
                return Ok(out);
            };
            let col = self.ftran(q);
            self.status[k] = if below { Status::Lower } else { Status::Upper };
            self.pivot(r, q, &col)?;
            let bp = RhsBreakpoint { rhs: p, objective: self.objective_now(), slope: self.row_dual(row) };
            match out.last_mut() {
                Some(last) if last.rhs == p => *last = bp,
                _ => out.push(bp),
            }
        }
    }

    fn objective_now(&self) -> f64 {
        (0..self.n).map(|j| self.cost[j] * self.x[j]).sum()
    }

    fn row_dual(&self, row: usize) -> f64 {
        let m = self.m;
        let mut y = 0.0;
        for r in 0..m {
            let cb = self.cost[self.basis[r]];
            if cb != 0.0 {
                y += cb * self.binv[r * m + row];
            }
        }
        y * self.row_scale[row]
    }

    /// Dual ratio test for a basic variable in row `r` that must move up
    /// (`below`) or down. Returns the entering column.
    fn dual_entering(&self, r: usize, below: bool, bland: bool) -> Option<usize> {
        let (m, n) = (self.m, self.n);
        let rho = &self.binv[r * m..(r + 1) * m];
        let y = self.duals_scaled(&self.cost);
        let mut enter: Option<(usize, f64, f64)> = None;
        for j in 0..n + 2 * m {
            let st = self.status[j];
            if st == Status::Basic || self.lo[j] == self.hi[j] {
                continue;
            }
            let alpha = self.column_dot(j, rho);
            if alpha.abs() <= self.opts.pivot_tol {
                continue;
            }
            // The basic variable moves by -alpha * dx_j.
            let up_ok = matches!(st, Status::Lower | Status::Free);
            let down_ok = matches!(st, Status::Upper | Status::Free);
            let eligible =
                if below { (alpha < 0.0 && up_ok) || (alpha > 0.0 && down_ok) } else { (alpha > 0.0 && up_ok) || (alpha < 0.0 && down_ok) };
            if !eligible {
                continue;
            }
            let d = self.reduced_cost(j, &self.cost, &y);
            let ratio = d.abs() / alpha.abs();
            let better = match enter {
                None => true,
                Some((_, best_ratio, best_alpha)) => {
                    if bland {
                        ratio < best_ratio - 1e-12
                    } else {
                        ratio < best_ratio - 1e-12 || (ratio <= best_ratio + 1e-12 && alpha.abs() > best_alpha.abs())
                    }
                }
            };
            if better {
                enter = Some((j, ratio, alpha));
            }
        }
        enter.map(|e| e.0)
    }

    fn cold_solve(&mut self) -> Result<LpSolution, LpError> {
        let (m, n) = (self.m, self.n);
        for j in 0..n {
            self.status[j] = self.resting_status(j);
            self.x[j] = self.resting_value(j);
        }
        let mut r = self.b.clone();
        for j in 0..n {
            if self.x[j] != 0.0 {
                for &(i, a) in &self.cols[j] {
                    r[i] -= a * self.x[j];
                }
            }
        }
        self.basis = vec![0; m];
        self.binv = vec![0.0; m * m];
        let mut need_phase1 = false;
        for i in 0..m {
            let s = n + i;
            let a = n + m + i;
            if r[i] >= self.lo[s] && r[i] <= self.hi[s] {
                self.status[s] = Status::Basic;
                self.x[s] = r[i];
                self.basis[i] = s;
                self.binv[i * m + i] = 1.0;
                self.lo[a] = 0.0;
                self.hi[a] = 0.0;
                self.status[a] = Status::Lower;
                self.x[a] = 0.0;
                self.art_sign[i] = 1.0;
            } else {
                let sv = r[i].clamp(self.lo[s], self.hi[s]);
                self.x[s] = sv;
                self.status[s] = if sv == self.lo[s] { Status::Lower } else { Status::Upper };
                let d = r[i] - sv;
                self.art_sign[i] = d.signum();
                self.lo[a] = 0.0;
                self.hi[a] = f64::INFINITY;
                self.status[a] = Status::Basic;
                self.x[a] = d.abs();
                self.basis[i] = a;
                self.binv[i * m + i] = self.art_sign[i];
                need_phase1 = true;
            }
        }
        self.since_refactor = 0;

        if need_phase1 {
            let mut c1 = vec![0.0; n + 2 * m];
            for i in 0..m {
                if self.status[n + m + i] == Status::Basic {
                    c1[n + m + i] = 1.0;
                }
            }
            match self.primal(&c1)? {
                Outcome::Limit => return Err(self.limit_error()),
                Outcome::Unbounded => return Err(LpError::Numerical("phase 1 reported an unbounded ray".into())),
                _ => {}
            }
            let infeas: f64 = (0..m).map(|i| self.x[n + m + i].max(0.0)).sum();
            if infeas > 1e-9 * (1.0 + self.b.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
                return Ok(self.finish(LpStatus::Infeasible));
            }
            for i in 0..m {
                self.hi[n + m + i] = 0.0;
                if self.status[n + m + i] != Status::Basic {
                    self.status[n + m + i] = Status::Lower;
                    self.x[n + m + i] = 0.0;
                }
            }
            self.recompute_basic_values();
        }

        let c = self.cost.clone();
        match self.primal(&c)? {
            Outcome::Optimal => {
                self.warm = true;
                Ok(self.finish(LpStatus::Optimal))
            }
            Outcome::Unbounded => Ok(self.finish(LpStatus::Unbounded)),
            Outcome::Limit => Err(self.limit_error()),
        }
    }

    /// Dual simplex from the stored basis. `None` asks for a cold start.
    fn dual_resolve(&mut self) -> Result<Option<LpSolution>, LpError> {
        let (m, n) = (self.m, self.n);
        for j in 0..n + 2 * m {
            match self.status[j] {
                Status::Basic => {}
                Status::Lower => self.x[j] = self.lo[j],
                Status::Upper => self.x[j] = self.hi[j],
                Status::Free => {
                    if self.lo[j].is_finite() || self.hi[j].is_finite() {
                        return Ok(None);
                    }
                    self.x[j] = 0.0;
                }
            }
        }
        self.recompute_basic_values();
        let y = self.duals_scaled(&self.cost);
        for j in 0..n + 2 * m {
            let st = self.status[j];
            if st == Status::Basic || self.lo[j] == self.hi[j] {
                continue;
            }
            let d = self.reduced_cost(j, &self.cost, &y);
            let bad = match st {
                Status::Lower => d < -self.opts.opt_tol * 10.0,
                Status::Upper => d > self.opts.opt_tol * 10.0,
                Status::Free => d.abs() > self.opts.opt_tol * 10.0,
                Status::Basic => false,
            };
            if bad {
                return Ok(None);
            }
        }

        let mut degenerate = 0usize;
        loop {
            if self.iterations >= self.opts.max_iterations {
                return Err(self.limit_error());
            }
            // Leaving row: largest primal infeasibility, lowest position on ties.
            let mut leave = None;
            let mut worst = FEAS_TOL;
            for r in 0..m {
                let k = self.basis[r];
                let v = (self.lo[k] - self.x[k]).max(self.x[k] - self.hi[k]);
                if v > worst {
                    worst = v;
                    leave = Some(r);
                }
            }
            let Some(r) = leave else {
                self.warm = true;
                return Ok(Some(self.finish(LpStatus::Optimal)));
            };
            let k = self.basis[r];
            let below = self.x[k] < self.lo[k];
            let target = if below { self.lo[k] } else { self.hi[k] };

            let bland = degenerate >= self.opts.bland_after;
            let Some(q) = self.dual_entering(r, below, bland) else {
                return Ok(Some(self.finish(LpStatus::Infeasible)));
            };
            let before = self.objective_now();
            let col = self.ftran(q);
            let alpha_rq = col[r];
            let dq = (self.x[k] - target) / alpha_rq;
            self.x[q] += dq;
            for i in 0..m {
                let bi = self.basis[i];
                self.x[bi] -= dq * col[i];
            }
            self.x[k] = target;
            self.status[k] = if below { Status::Lower } else { Status::Upper };
            self.pivot(r, q, &col)?;
            self.iterations += 1;
            if (self.objective_now() - before).abs() <= DEGENERATE_STEP {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
        }
    }

    fn primal(&mut self, c: &[f64]) -> Result<Outcome, LpError> {
        let (m, n) = (self.m, self.n);
        let total = n + 2 * m;
        let mut degenerate = 0usize;
        loop {
            if self.iterations >= self.opts.max_iterations {
                return Ok(Outcome::Limit);
            }
            let y = self.duals_scaled(c);
            let bland = degenerate >= self.opts.bland_after;
            let mut enter: Option<(usize, f64, f64)> = None;
            for j in 0..total {
                let st = self.status[j];
                if st == Status::Basic || self.lo[j] == self.hi[j] {
                    continue;
                }
                let d = self.reduced_cost(j, c, &y);
                let dir = match st {
                    Status::Lower if d < -self.opts.opt_tol => 1.0,
                    Status::Upper if d > self.opts.opt_tol => -1.0,
                    Status::Free if d.abs() > self.opts.opt_tol => -d.signum(),
                    _ => continue,
                };
                if bland {
                    enter = Some((j, dir, d));
                    break;
                }
                if enter.is_none_or(|(_, _, bd)| d.abs() > bd.abs()) {
                    enter = Some((j, dir, d));
                }
            }
            let Some((q, dir, _)) = enter else {
                return Ok(Outcome::Optimal);
            };

            let col = self.ftran(q);
            let span = self.hi[q] - self.lo[q];
            // (row, leaves at lower bound, step limit, |pivot|)
            let mut leave: Option<(usize, bool, f64, f64)> = None;
            for i in 0..m {
                let a = dir * col[i];
                if a.abs() <= self.opts.pivot_tol {
                    continue;
                }
                let k = self.basis[i];
                // x_k changes by -a * t.
                let (limit, to_lower) = if a > 0.0 {
                    if !self.lo[k].is_finite() {
                        continue;
                    }
                    (((self.x[k] - self.lo[k]) / a).max(0.0), true)
                } else {
                    if !self.hi[k].is_finite() {
                        continue;
                    }
                    (((self.hi[k] - self.x[k]) / -a).max(0.0), false)
                };
                let take = match leave {
                    None => true,
                    Some((li, _, best, best_a)) => {
                        if limit < best - 1e-12 {
                            true
                        } else if limit <= best + 1e-12 {
                            if bland {
                                k < self.basis[li]
                            } else {
                                a.abs() > best_a
                            }
                        } else {
                            false
                        }
                    }
                };
                if take {
                    leave = Some((i, to_lower, limit, a.abs()));
                }
            }
            let basic_step = leave.map_or(f64::INFINITY, |l| l.2);
            if span < basic_step {
                // Bound flip: q travels to its opposite bound, basis unchanged.
                self.x[q] = if dir > 0.0 { self.hi[q] } else { self.lo[q] };
                self.status[q] = if dir > 0.0 { Status::Upper } else { Status::Lower };
                for i in 0..m {
                    let k = self.basis[i];
                    self.x[k] -= dir * span * col[i];
                }
                self.iterations += 1;
                degenerate = 0;
                continue;
            }
            if leave.is_none() {
                return Ok(Outcome::Unbounded);
            }
            let step = basic_step;
            let (r, to_lower, _, _) = leave.expect("leaving row");
            if step <= DEGENERATE_STEP {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.x[q] += dir * step;
            for i in 0..m {
                let k = self.basis[i];
                self.x[k] -= dir * step * col[i];
            }
            let k = self.basis[r];
            if to_lower {
                self.x[k] = self.lo[k];
                self.status[k] = Status::Lower;
            } else {
                self.x[k] = self.hi[k];
                self.status[k] = Status::Upper;
            }
            self.pivot(r, q, &col)?;
            self.iterations += 1;
        }
    }

    fn resting_status(&self, j: usize) -> Status {
        if self.lo[j].is_finite() {
            Status::Lower
        } else if self.hi[j].is_finite() {
            Status::Upper
        } else {
            Status::Free
        }
    }

    fn resting_value(&self, j: usize) -> f64 {
        match self.resting_status(j) {
            Status::Lower => self.lo[j],
            Status::Upper => self.hi[j],
            _ => 0.0,
        }
    }

    fn column_dot(&self, j: usize, v: &[f64]) -> f64 {
        let (m, n) = (self.m, self.n);
        if j < n {
            self.cols[j].iter().map(|&(i, a)| a * v[i]).sum()
        } else if j < n + m {
            v[j - n]
        } else {
            self.art_sign[j - n - m] * v[j - n - m]
        }
    }

    fn reduced_cost(&self, j: usize, c: &[f64], y: &[f64]) -> f64 {
        c[j] - self.column_dot(j, y)
    }

    /// `y' = c_B' B^-1`.
    fn duals_scaled(&self, c: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for r in 0..m {
            let cb = c[self.basis[r]];
            if cb != 0.0 {
                let row = &self.binv[r * m..(r + 1) * m];
                for (yk, bk) in y.iter_mut().zip(row) {
                    *yk += cb * bk;
                }
            }
        }
        y
    }

    /// `B^-1 a_j`.
    fn ftran(&self, j: usize) -> Vec<f64> {
        let (m, n) = (self.m, self.n);
        let mut out = vec![0.0; m];
        let mut add = |i: usize, a: f64| {
            for (r, o) in out.iter_mut().enumerate() {
                *o += self.binv[r * m + i] * a;
            }
        };
        if j < n {
            for &(i, a) in &self.cols[j] {
                add(i, a);
            }
        } else if j < n + m {
            add(j - n, 1.0);
        } else {
            add(j - n - m, self.art_sign[j - n - m]);
        }
        out
    }

    fn pivot(&mut self, r: usize, q: usize, col: &[f64]) -> Result<(), LpError> {
        let m = self.m;
        let piv = col[r];
        if piv.abs() < 1e-14 {
            return Err(LpError::Numerical(format!("pivot element {piv:e} too small")));
        }
        let old = self.basis[r];
        let (before, rest) = self.binv.split_at_mut(r * m);
        let (prow, after) = rest.split_at_mut(m);
        for v in prow.iter_mut() {
            *v /= piv;
        }
        for (i, row) in before.chunks_mut(m).chain(after.chunks_mut(m)).enumerate() {
            let i = if i < r { i } else { i + 1 };
            let f = col[i];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * p;
                }
            }
        }
        self.basis[r] = q;
        self.status[q] = Status::Basic;
        if self.status[old] == Status::Basic {
            self.status[old] = Status::Lower;
        }
        self.since_refactor += 1;
        if self.since_refactor >= self.opts.refactor_every {
            self.refactor()?;
        }
        Ok(())
    }

    /// Rebuilds `B^-1` from scratch by Gauss-Jordan elimination and recomputes basic values.
    fn refactor(&mut self) -> Result<(), LpError> {
        let m = self.m;
        let mut a = vec![0.0; m * m];
        for (r, &k) in self.basis.iter().enumerate() {
            let mut unit = vec![0.0; m];
            self.scatter(k, &mut unit);
            for i in 0..m {
                a[i * m + r] = unit[i];
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for c in 0..m {
            let p = (c..m).max_by(|&x, &y| a[x * m + c].abs().total_cmp(&a[y * m + c].abs())).expect("non-empty pivot search");
            let pv = a[p * m + c];
            if pv.abs() < 1e-13 {
                return Err(LpError::Numerical("basis matrix became singular".into()));
            }
            if p != c {
                for k in 0..m {
                    a.swap(p * m + k, c * m + k);
                    inv.swap(p * m + k, c * m + k);
                }
            }
            for k in 0..m {
                a[c * m + k] /= pv;
                inv[c * m + k] /= pv;
            }
            for i in 0..m {
                if i == c {
                    continue;
                }
                let f = a[i * m + c];
                if f != 0.0 {
                    for k in 0..m {
                        a[i * m + k] -= f * a[c * m + k];
                        inv[i * m + k] -= f * inv[c * m + k];
                    }
                }
            }
        }
        self.binv = inv;
        self.since_refactor = 0;
        self.recompute_basic_values();
        Ok(())
    }

    fn scatter(&self, j: usize, out: &mut [f64]) {
        let (m, n) = (self.m, self.n);
        if j < n {
            for &(i, a) in &self.cols[j] {
                out[i] = a;
            }
        } else if j < n + m {
            out[j - n] = 1.0;
        } else {
            out[j - n - m] = self.art_sign[j - n - m];
        }
    }

    fn recompute_basic_values(&mut self) {
        let (m, n) = (self.m, self.n);
        let mut r = self.b.clone();
        for j in 0..n + 2 * m {
            if self.status[j] == Status::Basic || self.x[j] == 0.0 {
                continue;
            }
            let v = self.x[j];
            if j < n {
                for &(i, a) in &self.cols[j] {
                    r[i] -= a * v;
                }
            } else if j < n + m {
                r[j - n] -= v;
            } else {
                r[j - n - m] -= self.art_sign[j - n - m] * v;
            }
        }
        for p in 0..m {
            let row = &self.binv[p * m..(p + 1) * m];
            let v: f64 = row.iter().zip(&r).map(|(a, b)| a * b).sum();
            self.x[self.basis[p]] = v;
        }
    }

    fn finish(&self, status: LpStatus) -> LpSolution {
        let n = self.n;
        let mut primal: Vec<f64> = (0..n).map(|j| self.x[j] * self.col_scale[j]).collect();
        if status == LpStatus::Optimal {
            for (j, v) in primal.iter_mut().enumerate() {
                let lo = self.lo[j] * self.col_scale[j];
                let hi = self.hi[j] * self.col_scale[j];
                *v = v.clamp(lo, hi);
            }
        }
        let y = self.duals_scaled(&self.cost);
        let duals = y.iter().zip(&self.row_scale).map(|(v, s)| v * s).collect();
        let objective_value = (0..n).map(|j| self.cost[j] / self.col_scale[j] * primal[j]).sum();
        LpSolution { status, primal, duals, objective_value, iterations: self.iterations }
    }

    fn limit_error(&self) -> LpError {
        LpError::IterationLimit { partial: Box::new(self.finish(LpStatus::Infeasible)) }
    }
}

/// Two passes of geometric-mean row and column scaling.
fn geometric_scaling(cols: &[Vec<(usize, f64)>], m: usize) -> (Vec<f64>, Vec<f64>) {
    let n = cols.len();
    let mut rs = vec![1.0; m];
    let mut cs = vec![1.0; n];
    for _ in 0..2 {
        let mut rmin = vec![f64::INFINITY; m];
        let mut rmax = vec![0.0f64; m];
        for (j, col) in cols.iter().enumerate() {
            for &(i, a) in col {
                let v = (a * cs[j]).abs();
                rmin[i] = rmin[i].min(v);
                rmax[i] = rmax[i].max(v);
            }
        }
        for i in 0..m {
            if rmax[i] > 0.0 {
                rs[i] = pow2_round(1.0 / (rmin[i] * rmax[i]).sqrt());
            }
        }
        for (j, col) in cols.iter().enumerate() {
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for &(i, a) in col {
                let v = (a * rs[i]).abs();
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi > 0.0 {
                cs[j] = pow2_round(1.0 / (lo * hi).sqrt());
            }
        }
    }
    (rs, cs)
}

/// Rounds to a power of two so scaling is exact in floating point.
fn pow2_round(v: f64) -> f64 {
    2f64.powi(v.log2().round() as i32)
}
