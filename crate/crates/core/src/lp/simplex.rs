//! Dense two-phase tableau simplex with Bland's anti-cycling rule.
//!
//! Solves `min c'x  s.t.  A x {≤,=,≥} b,  x ≥ 0`. Every [`REINVERT_EVERY`] pivots,
//! and before optimality is declared, the tableau is rebuilt from the original data
//! through an LU factorization of the current basis, so round-off does not build up
//! over long degenerate runs. The final basis also yields the dual values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const PIVOT_TOL: f64 = 1e-10;
pub const FEASIBILITY_TOL: f64 = 1e-8;
pub const OPTIMALITY_TOL: f64 = 1e-8;
pub const PIVOT_LIMIT: usize = 100_000;
pub const REINVERT_EVERY: usize = 64;
/// Threshold-pivoting factor applied among tied rows of the ratio test.
pub const TIE_PIVOT_THRESHOLD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Le,
    Ge,
    Eq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Clone, Debug)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    /// Row-major `m × n` constraint matrix.
    pub matrix: Vec<f64>,
    pub kinds: Vec<RowKind>,
    pub rhs: Vec<f64>,
}

impl LinearProgram {
    pub fn new(n_vars: usize) -> Self {
        Self {
            cost: vec![0.0; n_vars],
            matrix: Vec::new(),
            kinds: Vec::new(),
            rhs: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rhs.len()
    }

    pub fn push_row(&mut self, coeffs: &[f64], kind: RowKind, rhs: f64) {
        assert_eq!(coeffs.len(), self.n_vars());
        self.matrix.extend_from_slice(coeffs);
        self.kinds.push(kind);
        self.rhs.push(rhs);
    }
}

#[derive(Clone, Debug)]
pub struct LpOutcome {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Row duals `y = c_B B⁻¹`; nonpositive on `≤` rows, nonnegative on `≥` rows.
    pub duals: Vec<f64>,
    pub phase_one_objective: f64,
    pub pivots: usize,
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// `rows × (cols + 1)`, last column is the right-hand side.
    data: Vec<f64>,
    basis: Vec<usize>,
    reduced: Vec<f64>,
    value: f64,
    /// Initial tableau, the source for reinversion.
    original: DMatrix<f64>,
    /// Rows found linearly dependent at the end of phase one.
    redundant: Vec<bool>,
}

impl Tableau {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.cols + 1) + j]
    }

    #[inline]
    fn rhs(&self, i: usize) -> f64 {
        self.data[i * (self.cols + 1) + self.cols]
    }

    fn price(&mut self, cost: &[f64]) {
        self.reduced.copy_from_slice(cost);
        self.value = 0.0;
        let w = self.cols + 1;
        for i in 0..self.rows {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.data[i * w..(i + 1) * w];
                for j in 0..self.cols {
                    self.reduced[j] -= cb * row[j];
                }
                self.value += cb * row[self.cols];
            }
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.cols + 1;
        let p = self.data[r * w + c];
        for v in &mut self.data[r * w..(r + 1) * w] {
            *v /= p;
        }
        let (before, rest) = self.data.split_at_mut(r * w);
        let (prow, after) = rest.split_at_mut(w);
        for chunk in before.chunks_exact_mut(w).chain(after.chunks_exact_mut(w)) {
            let f = chunk[c];
            if f != 0.0 {
                for (v, &pv) in chunk.iter_mut().zip(prow.iter()) {
                    *v -= f * pv;
                }
                chunk[c] = 0.0;
            }
        }
        let f = self.reduced[c];
        if f != 0.0 {
            for j in 0..self.cols {
                self.reduced[j] -= f * prow[j];
            }
            self.reduced[c] = 0.0;
            self.value += f * prow[self.cols];
        }
        self.basis[r] = c;
    }

    /// Rebuilds `B⁻¹[A | b]` for the current basis and re-prices; false if `B` is singular.
    fn reinvert(&mut self, cost: &[f64]) -> bool {
        let m = self.rows;
        let w = self.cols + 1;
        let b = DMatrix::from_fn(m, m, |i, r| self.original[(i, self.basis[r])]);
        let Some(solved) = b.lu().solve(&self.original) else {
            return false;
        };
        if solved.iter().any(|v| !v.is_finite()) {
            return false;
        }
        for i in 0..m {
            for j in 0..w {
                self.data[i * w + j] = solved[(i, j)];
            }
            // Basic columns are exact unit vectors.
            for (r, &col) in self.basis.iter().enumerate() {
                self.data[i * w + col] = if r == i { 1.0 } else { 0.0 };
            }
            if self.redundant[i] {
                for j in 0..w {
                    if j != self.basis[i] {
                        self.data[i * w + j] = 0.0;
                    }
                }
            }
        }
        self.price(cost);
        true
    }

    /// Bland: lowest-index improving column, ties in the ratio test go to the lowest basic index.
    fn run(&mut self, allowed: usize, cost: &[f64], pivots: &mut usize) -> LpStatus {
        let mut since_reinversion = 0;
        loop {
            if since_reinversion >= REINVERT_EVERY {
                self.reinvert(cost);
                since_reinversion = 0;
            }
            let mut entering = (0..allowed).find(|&j| self.reduced[j] < -OPTIMALITY_TOL);
            if entering.is_none() && since_reinversion > 0 && self.reinvert(cost) {
                since_reinversion = 0;
                entering = (0..allowed).find(|&j| self.reduced[j] < -OPTIMALITY_TOL);
            }
            let Some(c) = entering else {
                return LpStatus::Optimal;
            };
            // Ratio test in two passes: the minimum ratio, then among the rows tying
            // with it the lowest basic index whose pivot passes a threshold relative to
            // the largest tied pivot, so degenerate ties never pivot on round-off.
            let mut min_ratio = f64::INFINITY;
            for i in 0..self.rows {
                let a = self.at(i, c);
                if a > PIVOT_TOL {
                    min_ratio = min_ratio.min(self.rhs(i).max(0.0) / a);
                }
            }
            let tie = |ratio: f64| ratio <= min_ratio + 1e-12 * (1.0 + min_ratio.abs());
            let mut largest: f64 = 0.0;
            for i in 0..self.rows {
                let a = self.at(i, c);
                if a > PIVOT_TOL && tie(self.rhs(i).max(0.0) / a) {
                    largest = largest.max(a);
                }
            }
            let mut best: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.at(i, c);
                if a >= TIE_PIVOT_THRESHOLD * largest && a > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / a;
                    if tie(ratio) && best.is_none_or(|(bi, _)| self.basis[i] < self.basis[bi]) {
                        best = Some((i, ratio));
                    }
                }
            }
            let Some((r, _)) = best else {
                return LpStatus::Unbounded;
            };
            if *pivots >= PIVOT_LIMIT {
                return LpStatus::IterationLimit;
            }
            self.pivot(r, c);
            *pivots += 1;
            since_reinversion += 1;
        }
    }
}

pub fn solve(lp: &LinearProgram) -> LpOutcome {
    let n = lp.n_vars();
    let m = lp.n_rows();

    // Normalize to nonnegative right-hand sides.
    let mut flipped = vec![false; m];
    let mut kinds = lp.kinds.clone();
    let mut rhs = lp.rhs.clone();
    for i in 0..m {
        if rhs[i] < 0.0 {
            flipped[i] = true;
            rhs[i] = -rhs[i];
            kinds[i] = match kinds[i] {
                RowKind::Le => RowKind::Ge,
                RowKind::Ge => RowKind::Le,
                RowKind::Eq => RowKind::Eq,
            };
        }
    }

    let n_slack = kinds.iter().filter(|k| **k != RowKind::Eq).count();
    let n_art = kinds.iter().filter(|k| **k != RowKind::Le).count();
    let cols = n + n_slack + n_art;
    let art_start = n + n_slack;
    let w = cols + 1;

    let mut data = vec![0.0; m * w];
    let mut basis = vec![0usize; m];
    // Column of +e_i for each row: the slack of a ≤ row, the artificial otherwise.
    let mut identity_col = vec![0usize; m];
    let mut slack = n;
    let mut art = art_start;
    for i in 0..m {
        let sign = if flipped[i] { -1.0 } else { 1.0 };
        for j in 0..n {
            data[i * w + j] = sign * lp.matrix[i * n + j];
        }
        data[i * w + cols] = rhs[i];
        match kinds[i] {
            RowKind::Le => {
                data[i * w + slack] = 1.0;
                basis[i] = slack;
                identity_col[i] = slack;
                slack += 1;
            }
            RowKind::Ge => {
                data[i * w + slack] = -1.0;
                slack += 1;
                data[i * w + art] = 1.0;
                basis[i] = art;
                identity_col[i] = art;
                art += 1;
            }
            RowKind::Eq => {
                data[i * w + art] = 1.0;
                basis[i] = art;
                identity_col[i] = art;
                art += 1;
            }
        }
    }

    let original = DMatrix::from_row_slice(m, w, &data);
    let mut tab = Tableau {
        rows: m,
        cols,
        data,
        basis,
        reduced: vec![0.0; cols],
        value: 0.0,
        original,
        redundant: vec![false; m],
    };
    let mut pivots = 0;
    let mut phase_one_objective = 0.0;

    if n_art > 0 {
        let mut cost1 = vec![0.0; cols];
        for c in cost1.iter_mut().skip(art_start) {
            *c = 1.0;
        }
        tab.price(&cost1);
        let status = tab.run(cols, &cost1, &mut pivots);
        phase_one_objective = tab.value.max(0.0);
        if status == LpStatus::IterationLimit {
            return failed(LpStatus::IterationLimit, n, m, phase_one_objective, pivots);
        }
        let scale = 1.0 + rhs.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if phase_one_objective > FEASIBILITY_TOL * scale {
            return failed(LpStatus::Infeasible, n, m, phase_one_objective, pivots);
        }
        // Drive remaining artificials out of the basis; rows with no pivot are redundant.
        let mut redundant = Vec::new();
        for i in 0..m {
            if tab.basis[i] >= art_start {
                match (0..art_start).find(|&j| tab.at(i, j).abs() > PIVOT_TOL) {
                    Some(j) => {
                        tab.pivot(i, j);
                        pivots += 1;
                    }
                    None => redundant.push(i),
                }
            }
        }
        for &i in &redundant {
            tab.redundant[i] = true;
            // Zero row: keep it but pin its right-hand side.
            for j in 0..=cols {
                if j != tab.basis[i] {
                    tab.data[i * w + j] = 0.0;
                }
            }
        }
    }

    let mut cost2 = vec![0.0; cols];
    cost2[..n].copy_from_slice(&lp.cost);
    tab.price(&cost2);
    let status = tab.run(art_start, &cost2, &mut pivots);
    if status != LpStatus::Optimal {
        return failed(status, n, m, phase_one_objective, pivots);
    }

    let mut x_full = vec![0.0; cols];
    for i in 0..m {
        x_full[tab.basis[i]] = tab.rhs(i).max(0.0);
    }
    let mut duals: Vec<f64> = (0..m).map(|i| -tab.reduced[identity_col[i]]).collect();

    refine(lp, &flipped, &kinds, &rhs, &tab.basis, n, art_start, &cost2, &mut x_full, &mut duals);

    for i in 0..m {
        if flipped[i] {
            duals[i] = -duals[i];
        }
    }
    let x: Vec<f64> = x_full[..n].to_vec();
    let objective = x.iter().zip(&lp.cost).map(|(a, b)| a * b).sum();
    LpOutcome {
        status: LpStatus::Optimal,
        x,
        objective,
        duals,
        phase_one_objective,
        pivots,
    }
}

/// Re-solves `B x_B = b` and `B' y = c_B` from the original data.
#[allow(clippy::too_many_arguments)]
fn refine(
    lp: &LinearProgram,
    flipped: &[bool],
    kinds: &[RowKind],
    rhs: &[f64],
    basis: &[usize],
    n: usize,
    art_start: usize,
    cost: &[f64],
    x_full: &mut [f64],
    duals: &mut [f64],
) {
    let m = rhs.len();
    if m == 0 {
        return;
    }
    // Column `col` of the standardized constraint matrix.
    let mut slack_owner = Vec::new();
    let mut art_owner = Vec::new();
    for (i, k) in kinds.iter().enumerate() {
        if *k != RowKind::Eq {
            slack_owner.push((i, if *k == RowKind::Le { 1.0 } else { -1.0 }));
        }
        if *k != RowKind::Le {
            art_owner.push(i);
        }
    }
    let column = |col: usize, i: usize| -> f64 {
        if col < n {
            let v = lp.matrix[i * n + col];
            if flipped[i] {
                -v
            } else {
                v
            }
        } else if col < art_start {
            let (owner, sign) = slack_owner[col - n];
            if owner == i {
                sign
            } else {
                0.0
            }
        } else if art_owner[col - art_start] == i {
            1.0
        } else {
            0.0
        }
    };
    let b_mat = DMatrix::from_fn(m, m, |i, r| column(basis[r], i));
    let lu = b_mat.clone().lu();
    let b_vec = DVector::from_column_slice(rhs);
    if let Some(xb) = lu.solve(&b_vec) {
        if xb.iter().all(|v| v.is_finite() && *v >= -1e-9) {
            for (r, &col) in basis.iter().enumerate() {
                x_full[col] = xb[r].max(0.0);
            }
        }
    }
    let cb = DVector::from_fn(m, |r, _| cost[basis[r]]);
    if let Some(y) = b_mat.transpose().lu().solve(&cb) {
        if y.iter().all(|v| v.is_finite()) {
            duals.copy_from_slice(y.as_slice());
        }
    }
}

fn failed(status: LpStatus, n: usize, m: usize, phase_one_objective: f64, pivots: usize) -> LpOutcome {
    LpOutcome {
        status,
        x: vec![0.0; n],
        objective: f64::NAN,
        duals: vec![0.0; m],
        phase_one_objective,
        pivots,
    }
}
