//! Regularized GMM: `min ‖θ‖₁  s.t.  ‖f̂(θ)‖∞ ≤ λ`, solved by sequential linear
//! programming inside a trust region.
//!
//! Each outer step linearizes the moments at `θ_t` and solves the exact-penalty LP
//!
//! ```text
//! min ‖θ‖₁ + ρ t   s.t.  |f̂(θ_t) + Ĝ(θ_t)(θ − θ_t)| ≤ λ + t,  |θ − θ_t| ≤ r,  |θ| ≤ B.
//! ```
//!
//! Steps are accepted on the ratio of actual to predicted decrease of the merit
//! `‖θ‖₁ + ρ·max(0, ‖f̂(θ)‖∞ − λ)`. Among the iterates meeting the constraint, the
//! one with the smallest `‖θ‖₁` is returned. ℓ1-minimal solutions need not be
//! unique; ties go to whichever vertex the simplex reaches first.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp::closed_form_logit_delta;
use crate::error::{BlpError, Result};
use crate::lp::{solve_l1_elastic, LpStatus};
use crate::model::{Dataset, Theta};
use crate::moments::{evaluate, MomentEvaluation};
use crate::quadrature::QuadratureRule;
use crate::shares::InversionOptions;
use crate::stats::normal_quantile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RgmmOptions {
    pub lambda: f64,
    pub max_outer_iters: usize,
    pub trust_radius_init: f64,
    pub trust_shrink: f64,
    pub trust_expand: f64,
    /// Stop once `‖θ_{t+1} − θ_t‖₁` falls below this.
    pub convergence_tol: f64,
    /// Box `‖θ‖∞ ≤ param_bound` standing in for the parameter space.
    pub param_bound: f64,
    /// Starting `γ`. `γ = 0` is a stationary point of the moments in `γ`.
    pub gamma_start: GammaStart,
    /// Further starts tried after `gamma_start`; the best outcome is kept. Off by default.
    pub extra_starts: Vec<GammaStart>,
    /// Weight `ρ` on the constraint violation in the merit and the LP.
    pub merit_penalty: f64,
    /// An iterate counts as feasible when `‖f̂‖∞ ≤ λ + feasibility_tol`.
    pub feasibility_tol: f64,
    pub inversion: InversionOptions,
}

impl Default for RgmmOptions {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            max_outer_iters: 50,
            trust_radius_init: 1.0,
            trust_shrink: 0.5,
            trust_expand: 2.0,
            convergence_tol: 1e-8,
            param_bound: 100.0,
            gamma_start: GammaStart::Spectral,
            extra_starts: Vec::new(),
            merit_penalty: 1e4,
            feasibility_tol: 1e-10,
            inversion: InversionOptions::default(),
        }
    }
}

impl RgmmOptions {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(BlpError::Config("lambda must be finite and nonnegative".into()));
        }
        if !(self.trust_radius_init > 0.0 && self.convergence_tol > 0.0 && self.param_bound > 0.0) {
            return Err(BlpError::Config(
                "trust radius, convergence tolerance and parameter bound must be positive".into(),
            ));
        }
        if !(self.trust_shrink > 0.0 && self.trust_shrink < 1.0 && self.trust_expand > 1.0) {
            return Err(BlpError::Config("trust region needs 0 < shrink < 1 < expand".into()));
        }
        if !(self.merit_penalty > 0.0 && self.feasibility_tol >= 0.0) {
            return Err(BlpError::Config("merit penalty must be positive".into()));
        }
        self.inversion.validate()
    }
}

/// How the outer loop picks its starting `γ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaStart {
    /// `γ = 0`; the iterates then never leave `γ = 0`.
    Zero,
    /// Every `γ_l` equal to `value`.
    Constant { value: f64 },
    /// Leading eigenvector of the curvature of the moments at `γ = 0`, see [`spectral_gamma`].
    Spectral,
    /// Convex relaxation of the second-order model, see [`lifted_gamma`].
    Lifted,
}

/// One outer iteration, recorded at the candidate step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// `‖θ_t‖₁` at the start of the iteration.
    pub objective: f64,
    /// `‖f̂(θ_t)‖∞`.
    pub constraint: f64,
    pub radius: f64,
    pub step: f64,
    /// Slack the LP needed on the linearized moment rows.
    pub lp_slack: f64,
    #[serde(with = "crate::serde_util::nonfinite")]
    pub ratio: f64,
    pub accepted: bool,
    /// The accepted point came from a second-order correction.
    pub second_order: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta_hat: Theta,
    pub lambda: f64,
    pub outer_iters: usize,
    /// `‖f̂(θ̂)‖∞`.
    pub final_constraint: f64,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
    pub diagnosis: Option<String>,
}

/// `λ = c · n^{−1/2} · Φ⁻¹(1 − α/(2JK)) · max_{jk} σ̂_{jk}` from per-market scores (n×JK).
///
/// Falls back to `c · n^{−1/2}` when every score column is constant.
pub fn lambda_from_scores(per_market: &DMatrix<f64>, alpha: f64, c_mult: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BlpError::Config("alpha must lie in (0, 1)".into()));
    }
    if !(c_mult >= 0.0) {
        return Err(BlpError::Config("c_mult must be nonnegative".into()));
    }
    let (n, moments) = per_market.shape();
    if n == 0 || moments == 0 {
        return Err(BlpError::Data("no scores to calibrate lambda".into()));
    }
    let nf = n as f64;
    let mut sigma_max: f64 = 0.0;
    for col in per_market.column_iter() {
        let mean = col.sum() / nf;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
        sigma_max = sigma_max.max(var.sqrt());
    }
    let root_n = nf.sqrt();
    if sigma_max == 0.0 {
        log::warn!("all score columns are constant; lambda falls back to c/sqrt(n)");
        return Ok(c_mult / root_n);
    }
    let z = normal_quantile(1.0 - alpha / (2.0 * moments as f64));
    Ok(c_mult * z * sigma_max / root_n)
}

/// Plug-in `λ` from the score spread at a pilot estimate.
pub fn select_lambda(
    dataset: &Dataset,
    theta_pilot: &Theta,
    rule: &QuadratureRule,
    opts: &InversionOptions,
    alpha: f64,
    c_mult: f64,
) -> Result<f64> {
    let eval = evaluate(dataset, theta_pilot, rule, opts, false)?;
    lambda_from_scores(&eval.per_market, alpha, c_mult)
}

/// Moments at `γ = 0` are linear: `f̂(β, 0) = b − Aβ` with `A = E_n[h x']`, `b = E_n[h δ]`
/// and `δ` the plain-logit inversion.
pub fn logit_moment_system(dataset: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    let cfg = &dataset.config;
    let (jn, kn, ln) = (cfg.products(), cfg.instruments(), cfg.attributes());
    let mut a = DMatrix::zeros(jn * kn, ln);
    let mut b = DVector::zeros(jn * kn);
    for m in &dataset.markets {
        let delta = closed_form_logit_delta(&m.shares);
        for j in 0..jn {
            for k in 0..kn {
                let h = m.instruments[(j, k)];
                let row = j * kn + k;
                b[row] += h * delta[j];
                for l in 0..ln {
                    a[(row, l)] += h * m.x[(j, l)];
                }
            }
        }
    }
    let n = dataset.n_markets().max(1) as f64;
    (a / n, b / n)
}

/// Dantzig selector on the logit moment system, relaxed to the smallest feasible
/// tolerance if `λ` is too tight. Returns `β` and the slack that was needed.
pub fn logit_dantzig(dataset: &Dataset, lambda: f64, bound: f64) -> Result<(DVector<f64>, f64)> {
    let (a, b) = logit_moment_system(dataset);
    dantzig_beta(&a, &b, lambda, bound)
}

fn dantzig_beta(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64, bound: f64) -> Result<(DVector<f64>, f64)> {
    let ln = a.ncols();
    let rows = a.nrows();
    // Box rows keep the pilot inside the parameter space.
    let mut full = DMatrix::zeros(rows + ln, ln);
    full.rows_mut(0, rows).copy_from(a);
    full.rows_mut(rows, ln).fill_with_identity();
    let mut rhs = DVector::zeros(rows + ln);
    rhs.rows_mut(0, rows).copy_from(b);
    let mut tol = vec![lambda; rows];
    tol.extend(std::iter::repeat_n(bound, ln));
    let (slack, sol) = solve_l1_elastic(&full, &rhs, &tol, rows, 1e6)?;
    if sol.status != LpStatus::Optimal {
        return Err(BlpError::Infeasible(format!("Dantzig pilot LP ended {:?}", sol.status)));
    }
    Ok((sol.x, slack))
}

/// Plug-in `λ` at the plain-logit pilot: a first `λ` from the scores at `θ = 0`
/// gives a logit Dantzig `β`, and the scores there give the final `λ`.
pub fn auto_lambda(
    dataset: &Dataset,
    rule: &QuadratureRule,
    opts: &InversionOptions,
    alpha: f64,
    c_mult: f64,
) -> Result<f64> {
    let zero = Theta::zeros(dataset.config.attributes());
    let first = select_lambda(dataset, &zero, rule, opts, alpha, c_mult)?;
    let (beta, _) = logit_dantzig(dataset, first, 100.0)?;
    let pilot = Theta {
        beta,
        gamma: DVector::zeros(dataset.config.attributes()),
    };
    select_lambda(dataset, &pilot, rule, opts, alpha, c_mult)
}

/// Runs the SLP from each configured start and keeps the best outcome.
///
/// `β` starts at the Dantzig selector of the moment system, which is linear in `β`
/// once `γ` is fixed: first at `γ = 0` (plain logit), then again at the starting `γ`.
pub fn estimate(dataset: &Dataset, rule: &QuadratureRule, opts: &RgmmOptions) -> Result<EstimationResult> {
    opts.validate()?;
    let ln = dataset.config.attributes();
    let (beta_logit, _) = logit_dantzig(dataset, opts.lambda, opts.param_bound)?;
    let mut best: Option<EstimationResult> = None;
    for start in std::iter::once(&opts.gamma_start).chain(&opts.extra_starts) {
        let gamma = match start {
            GammaStart::Zero => DVector::zeros(ln),
            GammaStart::Constant { value } => DVector::from_element(ln, *value),
            GammaStart::Spectral => spectral_gamma(dataset, rule, &opts.inversion, &beta_logit)?,
            GammaStart::Lifted => lifted_gamma(dataset, rule, opts, &beta_logit)?,
        }
        .map(|v| v.clamp(-opts.param_bound, opts.param_bound));
        let beta = if gamma.iter().all(|&g| g == 0.0) {
            beta_logit.clone()
        } else {
            beta_at_gamma(dataset, rule, opts, &gamma)?
        };
        let run = estimate_from(dataset, rule, opts, Theta { beta, gamma })?;
        best = Some(match best {
            Some(b) if !better(&run, &b, opts) => b,
            _ => run,
        });
    }
    Ok(best.expect("at least one start"))
}

/// Dantzig `β` for the moments at a fixed `γ`: `f̂(β, γ) = f̂(0, γ) − E_n[h x'] β`.
fn beta_at_gamma(dataset: &Dataset, rule: &QuadratureRule, opts: &RgmmOptions, gamma: &DVector<f64>) -> Result<DVector<f64>> {
    let ln = dataset.config.attributes();
    let at_zero_beta = Theta {
        beta: DVector::zeros(ln),
        gamma: gamma.clone(),
    };
    let b = evaluate(dataset, &at_zero_beta, rule, &opts.inversion, false)?.score;
    let (a, _) = logit_moment_system(dataset);
    Ok(dantzig_beta(&a, &b, opts.lambda, opts.param_bound)?.0)
}

/// Step used for the finite-difference curvature in [`spectral_gamma`].
const CURVATURE_STEP: f64 = 1e-3;

/// Moments at `(β, 0)` and their `γ`-Hessians `H_r` there, by differencing Jacobians at `ε e_m`.
fn curvature_at_zero(
    dataset: &Dataset,
    rule: &QuadratureRule,
    opts: &InversionOptions,
    beta: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
    let ln = dataset.config.attributes();
    let base = Theta {
        beta: beta.clone(),
        gamma: DVector::zeros(ln),
    };
    let f0 = evaluate(dataset, &base, rule, opts, false)?.score;
    let mut hessians = vec![DMatrix::zeros(ln, ln); f0.len()];
    for m in 0..ln {
        let mut probe = base.clone();
        probe.gamma[m] = CURVATURE_STEP;
        let jac = evaluate(dataset, &probe, rule, opts, true)?.jacobian.expect("requested");
        for (r, h) in hessians.iter_mut().enumerate() {
            for l in 0..ln {
                h[(l, m)] = jac[(r, ln + l)] / CURVATURE_STEP;
            }
        }
    }
    for h in &mut hessians {
        *h = (&*h + h.transpose()) * 0.5;
    }
    Ok((f0, hessians))
}

/// Leading positive eigenpair of the symmetric matrix, as `√λ v` with the largest entry of `v` positive.
fn scaled_top_eigenvector(m: DMatrix<f64>) -> Option<DVector<f64>> {
    let eig = m.symmetric_eigen();
    let idx = eig.eigenvalues.iamax_full_positive()?;
    let col = eig.eigenvectors.column(idx);
    let lead = col.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    let sign = if lead < 0.0 { -1.0 } else { 1.0 };
    Some(col.into_owned() * (sign * eig.eigenvalues[idx].sqrt()))
}

/// Starting `γ` from a convex relaxation of the second-order model around `γ = 0`.
///
/// The moments are even in `γ`, so near `(β₀, 0)`
/// `f̂(β, γ) ≈ f̂(β₀, 0) − E_n[h x'](β − β₀) + ½ (⟨H_r, γγ'⟩)_r`.
/// Replacing `γγ'` by a free symmetric `Γ` (within-group blocks only) turns the
/// Dantzig problem in `(β, Γ)` into an LP. `γ` is read off the leading eigenpair of
/// each group block of `Γ`; blocks without a positive eigenvalue start at zero.
pub fn lifted_gamma(
    dataset: &Dataset,
    rule: &QuadratureRule,
    opts: &RgmmOptions,
    beta0: &DVector<f64>,
) -> Result<DVector<f64>> {
    let cfg = &dataset.config;
    let (ln, jk) = (cfg.attributes(), cfg.moments());
    let (f0, hessians) = curvature_at_zero(dataset, rule, &opts.inversion, beta0)?;
    let (a, _) = logit_moment_system(dataset);
    let pairs: Vec<(usize, usize)> = (0..ln)
        .flat_map(|l| (l..ln).map(move |m| (l, m)))
        .filter(|&(l, m)| cfg.group_of(l) == cfg.group_of(m))
        .collect();
    let nv = ln + pairs.len();
    let mut lhs = DMatrix::zeros(jk + nv, nv);
    let mut rhs = DVector::zeros(jk + nv);
    for r in 0..jk {
        for l in 0..ln {
            lhs[(r, l)] = -a[(r, l)];
        }
        for (p, &(l, m)) in pairs.iter().enumerate() {
            let mult = if l == m { 0.5 } else { 1.0 };
            lhs[(r, ln + p)] = mult * hessians[r][(l, m)];
        }
        rhs[r] = -f0[r] - (a.row(r) * beta0)[(0, 0)];
    }
    lhs.view_mut((jk, 0), (nv, nv)).fill_with_identity();
    let mut tol = vec![opts.lambda; jk];
    tol.extend(std::iter::repeat_n(opts.param_bound, ln));
    tol.extend(std::iter::repeat_n(opts.param_bound * opts.param_bound, pairs.len()));
    let (_, sol) = solve_l1_elastic(&lhs, &rhs, &tol, jk, 1e6)?;
    if sol.status != LpStatus::Optimal {
        return Err(BlpError::Infeasible(format!("lifted start LP ended {:?}", sol.status)));
    }

    let mut gamma = DVector::zeros(ln);
    for g in 0..cfg.groups() {
        let members: Vec<usize> = (0..ln).filter(|&l| cfg.group_of(l) == g).collect();
        let pos = |l: usize| members.iter().position(|&x| x == l).expect("member");
        let mut block = DMatrix::zeros(members.len(), members.len());
        for (p, &(l, m)) in pairs.iter().enumerate() {
            if cfg.group_of(l) == g {
                block[(pos(l), pos(m))] = sol.x[ln + p];
                block[(pos(m), pos(l))] = sol.x[ln + p];
            }
        }
        if let Some(v) = scaled_top_eigenvector(block) {
            for (i, &l) in members.iter().enumerate() {
                gamma[l] = v[i];
            }
        }
    }
    Ok(gamma)
}

/// Starting `γ` from the second-order behaviour of the moments around `γ = 0`.
///
/// With `w = −f̂(β, 0)`, the direction of `γ` within each group is the leading
/// eigenvector of `Σ_r w_r H_r`; the group scales are then fitted by least squares
/// on the quadratic model. Groups without positive curvature start at zero.
pub fn spectral_gamma(
    dataset: &Dataset,
    rule: &QuadratureRule,
    opts: &InversionOptions,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let cfg = &dataset.config;
    let (ln, gn, jk) = (cfg.attributes(), cfg.groups(), cfg.moments());
    let (f0, hessians) = curvature_at_zero(dataset, rule, opts, beta)?;

    let mut directions = Vec::with_capacity(gn);
    for g in 0..gn {
        let members: Vec<usize> = (0..ln).filter(|&l| cfg.group_of(l) == g).collect();
        let k = members.len();
        let weighted = DMatrix::from_fn(k, k, |a, b| {
            (0..jk).map(|r| -f0[r] * hessians[r][(members[a], members[b])]).sum::<f64>()
        });
        let mut v = DVector::zeros(ln);
        if let Some(top) = scaled_top_eigenvector(weighted) {
            let top = top.normalize();
            for (a, &l) in members.iter().enumerate() {
                v[l] = top[a];
            }
        }
        directions.push(v);
    }

    // f0 + ½ Q u ≈ 0 with u_g = τ_g², Q_{rg} = v_g' H_r v_g.
    let q = DMatrix::from_fn(jk, gn, |r, g| {
        let v = &directions[g];
        (v.transpose() * &hessians[r] * v)[(0, 0)]
    });
    let normal = q.transpose() * &q;
    let rhs = -(q.transpose() * &f0) * 2.0;
    let u = normal
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| DVector::from_fn(gn, |g, _| if normal[(g, g)] > 0.0 { rhs[g] / normal[(g, g)] } else { 0.0 }));
    let mut gamma = DVector::zeros(ln);
    for (g, v) in directions.iter().enumerate() {
        if u[g] > 0.0 && u[g].is_finite() {
            gamma += v * u[g].sqrt();
        }
    }
    Ok(gamma)
}

trait PositiveArgmax {
    fn iamax_full_positive(&self) -> Option<usize>;
}

impl PositiveArgmax for DVector<f64> {
    /// Index of the largest strictly positive entry.
    fn iamax_full_positive(&self) -> Option<usize> {
        self.iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

fn better(a: &EstimationResult, b: &EstimationResult, opts: &RgmmOptions) -> bool {
    let feasible = |r: &EstimationResult| r.final_constraint <= opts.lambda + opts.feasibility_tol;
    match (feasible(a), feasible(b)) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => a.theta_hat.l1_norm() < b.theta_hat.l1_norm(),
        (false, false) => a.final_constraint < b.final_constraint,
    }
}

/// `[G; I]`: moment rows on top of the trust-region box rows.
fn stacked_rows(g: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let jk = g.nrows();
    let mut a = DMatrix::zeros(jk + p, p);
    a.rows_mut(0, jk).copy_from(g);
    a.rows_mut(jk, p).fill_with_identity();
    a
}

struct Iterate {
    theta: DVector<f64>,
    eval: MomentEvaluation,
    constraint: f64,
}

/// SLP from a given starting point.
pub fn estimate_from(
    dataset: &Dataset,
    rule: &QuadratureRule,
    opts: &RgmmOptions,
    start: Theta,
) -> Result<EstimationResult> {
    opts.validate()?;
    let lambda = opts.lambda;
    let rho = opts.merit_penalty;
    let bound = opts.param_bound;
    let p = 2 * dataset.config.attributes();
    let jk = dataset.config.moments();
    let feasible = |c: f64| c <= lambda + opts.feasibility_tol;
    let merit = |theta: &DVector<f64>, c: f64| theta.lp_norm(1) + rho * (c - lambda).max(0.0);

    let point = |theta: DVector<f64>| -> Result<Iterate> {
        let eval = evaluate(dataset, &Theta::from_stacked(&theta)?, rule, &opts.inversion, true)?;
        let constraint = eval.sup_norm();
        Ok(Iterate {
            theta,
            eval,
            constraint,
        })
    };
    // Inversion trouble at a trial point only rejects the step.
    let try_point = |theta: DVector<f64>| -> Result<Option<Iterate>> {
        match point(theta) {
            Ok(t) => Ok(Some(t)),
            Err(BlpError::Inversion { .. }) | Err(BlpError::Singular(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let mut current = point(start.stacked().map(|v| v.clamp(-bound, bound)))?;
    let mut best_feasible: Option<(DVector<f64>, f64)> = None;
    let mut best_merit = (current.theta.clone(), current.constraint);
    if feasible(current.constraint) {
        best_feasible = Some((current.theta.clone(), current.constraint));
    }
    let mut radius = opts.trust_radius_init;
    let mut history = Vec::new();
    let mut converged = false;
    let mut outer_iters = 0;

    while outer_iters < opts.max_outer_iters {
        outer_iters += 1;
        let g = current.eval.jacobian.as_ref().expect("jacobian requested");
        let a = stacked_rows(g, p);
        let mut b = DVector::zeros(jk + p);
        let mut tol = vec![lambda; jk + p];
        for i in 0..p {
            let lo = (current.theta[i] - radius).max(-bound);
            let hi = (current.theta[i] + radius).min(bound);
            b[jk + i] = 0.5 * (lo + hi);
            tol[jk + i] = 0.5 * (hi - lo).max(0.0);
        }
        // Linearized rows: |f0 + G(θ − θ_t)| ≤ λ, i.e. |Gθ − (Gθ_t − f0)| ≤ λ.
        let gt = g * &current.theta;
        let solve_step = |b: &mut DVector<f64>, f0: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            b.rows_mut(0, jk).copy_from(&(&gt - f0));
            let (slack, sol) = solve_l1_elastic(&a, b, &tol, jk, rho)?;
            if sol.status != LpStatus::Optimal {
                return Err(BlpError::Numerical(format!(
                    "trust-region subproblem ended {:?} at outer iteration {outer_iters}",
                    sol.status
                )));
            }
            Ok((slack, sol.x.map(|v| v.clamp(-bound, bound))))
        };
        let (lp_slack, candidate) = solve_step(&mut b, &current.eval.score)?;
        let d = &candidate - &current.theta;
        let step = d.lp_norm(1);
        let phi = merit(&current.theta, current.constraint);
        let predicted = phi - (candidate.lp_norm(1) + rho * lp_slack);
        let mut record = IterationRecord {
            objective: current.theta.lp_norm(1),
            constraint: current.constraint,
            radius,
            step,
            lp_slack,
            ratio: f64::NAN,
            accepted: false,
            second_order: false,
        };
        if step < opts.convergence_tol || predicted <= 1e-14 * (1.0 + phi.abs()) {
            history.push(record);
            converged = true;
            break;
        }

        let ratio_of = |t: &Option<Iterate>| t.as_ref().map_or(f64::NEG_INFINITY, |t| (phi - merit(&t.theta, t.constraint)) / predicted);
        let mut trial = try_point(candidate)?;
        let mut ratio = ratio_of(&trial);
        if ratio <= 0.1 {
            // Second-order correction: re-solve with the curvature the step exposed.
            if let Some(t) = trial.as_ref() {
                let shifted = &t.eval.score - g * &d;
                let (_, corrected) = solve_step(&mut b, &shifted)?;
                let soc = try_point(corrected)?;
                let soc_ratio = ratio_of(&soc);
                if soc_ratio > 0.1 {
                    trial = soc;
                    ratio = soc_ratio;
                    record.second_order = true;
                }
            }
        }
        record.ratio = ratio;
        let on_boundary = d.amax() >= 0.99 * radius;
        if ratio < 0.25 {
            radius = opts.trust_shrink * radius.min(d.amax());
        } else if ratio > 0.75 && on_boundary {
            radius = (opts.trust_expand * radius).min(2.0 * bound);
        }
        if ratio > 0.1 {
            record.accepted = true;
            current = trial.expect("finite ratio implies a trial point");
            if feasible(current.constraint) {
                let better = best_feasible
                    .as_ref()
                    .is_none_or(|(th, _)| current.theta.lp_norm(1) <= th.lp_norm(1));
                if better {
                    best_feasible = Some((current.theta.clone(), current.constraint));
                }
            }
            if merit(&current.theta, current.constraint) < merit(&best_merit.0, best_merit.1) {
                best_merit = (current.theta.clone(), current.constraint);
            }
        }
        history.push(record);
        if radius < opts.convergence_tol {
            // No step, however short, improves the merit: a stationary point.
            converged = true;
            break;
        }
    }

    let (theta, final_constraint, diagnosis) = match best_feasible {
        Some((th, c)) => (th, c, None),
        None => {
            converged = false;
            let (th, c) = best_merit;
            (
                th,
                c,
                Some(format!(
                    "lambda too small: no iterate met ‖f̂‖∞ ≤ {lambda:.3e}; smallest violation {c:.3e}"
                )),
            )
        }
    };
    let diagnosis = diagnosis.or_else(|| {
        (!converged).then(|| format!("stopped after {outer_iters} outer iterations without meeting the step tolerance"))
    });
    Ok(EstimationResult {
        theta_hat: Theta::from_stacked(&theta)?,
        lambda,
        outer_iters,
        final_constraint,
        converged,
        history,
        diagnosis,
    })
}
