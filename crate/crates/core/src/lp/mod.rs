//! Dantzig-selector linear programs: `min ‖x‖₁  s.t.  ‖A x − b‖∞ ≤ λ`.
//!
//! Every program here is posed on the split `x = u − v` with `u, v ≥ 0` and two
//! one-sided rows per constraint, then handed to the dense [`simplex`] engine.

pub mod simplex;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BlpError, Result};
pub use simplex::LpStatus;
use simplex::{LinearProgram, RowKind};

/// Dense solver guard on `m·p`.
pub const MAX_DENSE_ENTRIES: usize = 10_000_000;

#[derive(Clone, Debug)]
pub struct L1LinfProblem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lambda: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LpSolution {
    pub x: DVector<f64>,
    pub status: LpStatus,
    /// `‖x‖₁`.
    pub objective: f64,
    /// `max_i (|a_i'x − b_i| − λ_i)`; nonpositive up to tolerance when optimal.
    pub max_violation: f64,
    /// Dual vector `y` with `‖A'y‖∞ ≤ 1` and `b'y − Σ λ_i |y_i| = ‖x‖₁` at optimality.
    pub dual: DVector<f64>,
    pub phase_one_objective: f64,
    pub pivots: usize,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// Linear program `min w₁‖x‖₁ + w_t·t  s.t.  |a_i'x − b_i| ≤ λ_i + t·[i < elastic_rows]`.
#[derive(Clone, Debug)]
pub(crate) struct DantzigProgram<'a> {
    pub a: &'a DMatrix<f64>,
    pub b: &'a DVector<f64>,
    pub tolerances: &'a [f64],
    pub l1_weight: f64,
    pub elastic: Option<(usize, f64)>,
}

pub(crate) struct DantzigOutcome {
    pub solution: LpSolution,
    pub slack: f64,
}

impl DantzigProgram<'_> {
    pub fn solve(&self) -> Result<DantzigOutcome> {
        let (m, p) = self.a.shape();
        if m * p > MAX_DENSE_ENTRIES {
            return Err(BlpError::LpTooLarge { rows: m, cols: p });
        }
        if self.b.len() != m {
            return Err(BlpError::dimension("rhs", m, self.b.len()));
        }
        if self.tolerances.len() != m {
            return Err(BlpError::dimension("row tolerances", m, self.tolerances.len()));
        }
        if self.tolerances.iter().any(|t| !(*t >= 0.0)) {
            return Err(BlpError::Config("row tolerances must be nonnegative".into()));
        }
        if self.a.iter().chain(self.b.iter()).any(|v| !v.is_finite()) {
            return Err(BlpError::Numerical("non-finite LP data".into()));
        }
        let elastic_rows = self.elastic.map(|(rows, _)| rows.min(m)).unwrap_or(0);
        let n_vars = 2 * p + usize::from(self.elastic.is_some());
        let mut lp = LinearProgram::new(n_vars);
        for c in lp.cost.iter_mut().take(2 * p) {
            *c = self.l1_weight;
        }
        if let Some((_, weight)) = self.elastic {
            lp.cost[2 * p] = weight;
        }
        let mut coeffs = vec![0.0; n_vars];
        for i in 0..m {
            let t_coeff = if i < elastic_rows { -1.0 } else { 0.0 };
            for sign in [1.0, -1.0] {
                for j in 0..p {
                    let a = sign * self.a[(i, j)];
                    coeffs[j] = a;
                    coeffs[p + j] = -a;
                }
                if self.elastic.is_some() {
                    coeffs[2 * p] = t_coeff;
                }
                lp.push_row(&coeffs, RowKind::Le, self.tolerances[i] + sign * self.b[i]);
            }
        }
        let out = simplex::solve(&lp);
        let x = DVector::from_fn(p, |j, _| out.x[j] - out.x[p + j]);
        let slack = if self.elastic.is_some() { out.x[2 * p] } else { 0.0 };
        let residual = self.a * &x - self.b;
        let max_violation = residual
            .iter()
            .zip(self.tolerances)
            .enumerate()
            .map(|(i, (r, t))| r.abs() - t - if i < elastic_rows { slack } else { 0.0 })
            .fold(f64::NEG_INFINITY, f64::max);
        // y = π₊ − π₋ from the paired rows.
        let dual = DVector::from_fn(m, |i, _| out.duals[2 * i] - out.duals[2 * i + 1]);
        let objective = x.lp_norm(1);
        Ok(DantzigOutcome {
            solution: LpSolution {
                x,
                status: out.status,
                objective,
                max_violation: if m == 0 { 0.0 } else { max_violation },
                dual,
                phase_one_objective: out.phase_one_objective,
                pivots: out.pivots,
            },
            slack,
        })
    }
}

/// `min ‖x‖₁  s.t.  ‖A x − b‖∞ ≤ λ`.
pub fn solve_l1_linf(problem: &L1LinfProblem) -> Result<LpSolution> {
    let tol = vec![problem.lambda; problem.a.nrows()];
    solve_l1_rows(&problem.a, &problem.b, &tol)
}

/// Row-wise tolerances: `min ‖x‖₁  s.t.  |a_i'x − b_i| ≤ λ_i` for every row.
pub fn solve_l1_rows(a: &DMatrix<f64>, b: &DVector<f64>, tolerances: &[f64]) -> Result<LpSolution> {
    Ok(DantzigProgram {
        a,
        b,
        tolerances,
        l1_weight: 1.0,
        elastic: None,
    }
    .solve()?
    .solution)
}

/// Smallest uniform relaxation `t ≥ 0` of the first `elastic_rows` rows that makes the
/// row system feasible, together with a point attaining it.
pub fn min_relaxation(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    tolerances: &[f64],
    elastic_rows: usize,
) -> Result<(f64, LpSolution)> {
    let out = DantzigProgram {
        a,
        b,
        tolerances,
        l1_weight: 0.0,
        elastic: Some((elastic_rows, 1.0)),
    }
    .solve()?;
    Ok((out.slack, out.solution))
}

/// Exact-penalty form `min ‖x‖₁ + w·t  s.t.  |a_i'x − b_i| ≤ λ_i + t·[i < elastic_rows]`.
///
/// Always feasible when the remaining rows are; returns `(t, solution)`.
pub fn solve_l1_elastic(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    tolerances: &[f64],
    elastic_rows: usize,
    weight: f64,
) -> Result<(f64, LpSolution)> {
    let out = DantzigProgram {
        a,
        b,
        tolerances,
        l1_weight: 1.0,
        elastic: Some((elastic_rows, weight)),
    }
    .solve()?;
    Ok((out.slack, out.solution))
}

/// Matrix of row solutions from [`solve_row_family`].
#[derive(Clone, Debug)]
pub struct RowFamilySolution {
    pub solutions: Vec<LpSolution>,
}

impl RowFamilySolution {
    /// Stacks the row solutions; rows that did not solve to optimality are left as zeros.
    pub fn matrix(&self) -> DMatrix<f64> {
        let rows = self.solutions.len();
        let cols = self.solutions.first().map_or(0, |s| s.x.len());
        let mut out = DMatrix::zeros(rows, cols);
        for (r, s) in self.solutions.iter().enumerate() {
            if s.is_optimal() {
                out.row_mut(r).copy_from(&s.x.transpose());
            }
        }
        out
    }

    pub fn failed_rows(&self) -> Vec<usize> {
        self.solutions
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_optimal())
            .map(|(r, _)| r)
            .collect()
    }
}

/// Row `r` solves `min ‖x‖₁  s.t.  ‖x A − B_r‖∞ ≤ λ_r`; rows are solved in parallel.
pub fn solve_row_family(a: &DMatrix<f64>, rhs_rows: &DMatrix<f64>, lambdas: &[f64]) -> Result<RowFamilySolution> {
    if rhs_rows.ncols() != a.ncols() {
        return Err(BlpError::dimension("right-hand side width", a.ncols(), rhs_rows.ncols()));
    }
    if lambdas.len() != rhs_rows.nrows() {
        return Err(BlpError::dimension("row penalties", rhs_rows.nrows(), lambdas.len()));
    }
    let at = a.transpose();
    let solutions = (0..rhs_rows.nrows())
        .into_par_iter()
        .map(|r| {
            let b = rhs_rows.row(r).transpose();
            solve_l1_linf(&L1LinfProblem {
                a: at.clone(),
                b,
                lambda: lambdas[r],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RowFamilySolution { solutions })
}
