//! Dense bounded-variable revised simplex.
//!
//! Problems are stated as `min c'x` subject to linear rows (`<=`, `=`, `>=`) and
//! per-variable boxes `lo <= x <= hi`. Boxes are handled by the simplex itself
//! (nonbasic variables sit at one of their bounds), so a box never costs a row.
//!
//! [`solve`] is the one-shot entry point. [`WarmSimplex`] keeps the factorized
//! basis of the last solve so that a problem whose right-hand sides or bounds
//! change can be re-optimized with the dual simplex from the previous basis.

mod simplex;

use std::fmt::Write as _;

use thiserror::Error;

pub use simplex::{RhsBreakpoint, SimplexOptions, WarmSimplex};

/// Row relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

impl Relation {
    fn symbol(self) -> &'static str {
        match self {
            Relation::Le => "<=",
            Relation::Eq => "=",
            Relation::Ge => ">=",
        }
    }
}

/// One linear row `sum(coef * x[idx]) rel rhs`. Repeated indices are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub terms: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn new(terms: Vec<(usize, f64)>, relation: Relation, rhs: f64) -> Self {
        Self { terms, relation, rhs }
    }

    /// Row activity at `point`.
    pub fn activity(&self, point: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * point[j]).sum()
    }

    /// Amount by which `point` violates this row (0 when satisfied).
    pub fn violation(&self, point: &[f64]) -> f64 {
        let lhs = self.activity(point);
        match self.relation {
            Relation::Le => (lhs - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - lhs).max(0.0),
            Relation::Eq => (lhs - self.rhs).abs(),
        }
    }
}

/// A minimization LP with boxed variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub var_bounds: Vec<(f64, f64)>,
    pub constraints: Vec<Constraint>,
}

impl LpProblem {
    /// Zero objective, every variable in `[0, inf)`, no rows.
    pub fn new(num_vars: usize) -> Self {
        Self { num_vars, objective: vec![0.0; num_vars], var_bounds: vec![(0.0, f64::INFINITY); num_vars], constraints: Vec::new() }
    }

    pub fn add_constraint(&mut self, terms: Vec<(usize, f64)>, relation: Relation, rhs: f64) -> usize {
        self.constraints.push(Constraint::new(terms, relation, rhs));
        self.constraints.len() - 1
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Checks dimensions, bound ordering and finiteness of the data.
    pub fn validate(&self) -> Result<(), LpError> {
        if self.objective.len() != self.num_vars {
            return Err(LpError::Malformed(format!("objective has {} coefficients for {} variables", self.objective.len(), self.num_vars)));
        }
        if self.var_bounds.len() != self.num_vars {
            return Err(LpError::Malformed(format!("{} bounds for {} variables", self.var_bounds.len(), self.num_vars)));
        }
        if let Some(j) = self.objective.iter().position(|c| !c.is_finite()) {
            return Err(LpError::Malformed(format!("objective coefficient {j} is not finite")));
        }
        for (j, &(lo, hi)) in self.var_bounds.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(LpError::Malformed(format!("variable {j} has invalid bounds [{lo}, {hi}]")));
            }
        }
        for (i, row) in self.constraints.iter().enumerate() {
            if !row.rhs.is_finite() {
                return Err(LpError::Malformed(format!("row {i} has non-finite rhs")));
            }
            for &(j, a) in &row.terms {
                if j >= self.num_vars {
                    return Err(LpError::Malformed(format!("row {i} references variable {j} of {}", self.num_vars)));
                }
                if !a.is_finite() {
                    return Err(LpError::Malformed(format!("row {i} has a non-finite coefficient")));
                }
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, point: &[f64]) -> f64 {
        self.objective.iter().zip(point).map(|(c, x)| c * x).sum()
    }

    /// Plain-text dump, one line per row, fixed-point numbers. Meant for diffing.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "vars {} rows {}", self.num_vars, self.constraints.len());
        let _ = write!(out, "min");
        for (j, c) in self.objective.iter().enumerate() {
            if *c != 0.0 {
                let _ = write!(out, " {c:+.9}*x{j}");
            }
        }
        out.push('\n');
        for (j, (lo, hi)) in self.var_bounds.iter().enumerate() {
            let _ = writeln!(out, "bound x{j} {} {}", fixed(*lo), fixed(*hi));
        }
        for (i, row) in self.constraints.iter().enumerate() {
            let _ = write!(out, "r{i}:");
            for (j, a) in &row.terms {
                let _ = write!(out, " {a:+.9}*x{j}");
            }
            let _ = writeln!(out, " {} {}", row.relation.symbol(), fixed(row.rhs));
        }
        out
    }
}

fn fixed(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v:.9}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    /// Row multipliers `y` with reduced costs `c - A'y`; only meaningful when optimal.
    pub duals: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
}

#[derive(Debug, Error)]
pub enum LpError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("iteration limit reached after {} iterations", .partial.iterations)]
    IterationLimit { partial: Box<LpSolution> },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Solves `lp` with default options, bound tolerance `tol`.
pub fn solve(lp: &LpProblem, tol: f64) -> Result<LpSolution, LpError> {
    let opts = SimplexOptions { bound_tol: tol, ..SimplexOptions::default() };
    solve_with(lp, &opts)
}

pub fn solve_with(lp: &LpProblem, opts: &SimplexOptions) -> Result<LpSolution, LpError> {
    let mut engine = WarmSimplex::new(lp, opts.clone())?;
    engine.solve()
}

/// Maximum row violation and maximum bound violation of `point`.
pub fn residuals(lp: &LpProblem, point: &[f64]) -> Result<(f64, f64), LpError> {
    if point.len() != lp.num_vars {
        return Err(LpError::Malformed(format!("point has length {} but the problem has {} variables", point.len(), lp.num_vars)));
    }
    let row_viol = lp.constraints.iter().map(|r| r.violation(point)).fold(0.0, f64::max);
    let bound_viol = lp.var_bounds.iter().zip(point).map(|(&(lo, hi), &x)| (lo - x).max(x - hi).max(0.0)).fold(0.0, f64::max);
    Ok((row_viol, bound_viol))
}
