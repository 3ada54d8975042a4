//! One-step de-biasing of the RGMM estimate and coordinate-wise inference.
//!
//! Given `θ̂`, the plug-ins `Ĝ = ∂f̂/∂θ'(θ̂)` (`JK × 2L`) and the uncentered `Ω̂`, two
//! families of row LPs produce `γ̂` (`2L × JK`, an approximate `Ĝ'Ω̂⁻¹`) and `μ̂`
//! (`2L × 2L`, an approximate inverse of `γ̂Ĝ`). The corrected estimate is
//! `θ̂ − μ̂γ̂f̂(θ̂)` with sandwich variance `μ̂γ̂Ω̂γ̂'μ̂'/n`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BlpError, Result};
use crate::lp::{min_relaxation, solve_row_family, RowFamilySolution};
use crate::model::{Dataset, ModelConfig, Theta};
use crate::moments::evaluate;
use crate::quadrature::QuadratureRule;
use crate::shares::InversionOptions;
use crate::stats::normal_quantile;

/// Largest post-hoc constraint excess accepted from a row LP.
pub const ROW_SLACK_TOL: f64 = 1e-8;
/// Variance diagonals below this are an error; between it and zero they are clamped.
pub const NEGATIVE_VARIANCE_TOL: f64 = -1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebiasPenalties {
    /// One per row of `γ̂`, length `2L`.
    pub lambda_gamma: Vec<f64>,
    /// One per row of `μ̂`, length `2L`.
    pub lambda_mu: Vec<f64>,
    pub bar_a: f64,
    pub c_prime: f64,
}

/// `λ̃ = n^{−1/2+ā} J²G Φ⁻¹(1 − (2J²GKLn)⁻¹)`.
pub fn rate_lambda_tilde(config: &ModelConfig, n: usize, bar_a: f64) -> f64 {
    let j = config.products() as f64;
    let g = config.groups() as f64;
    let k = config.instruments() as f64;
    let l = config.attributes() as f64;
    let nf = n as f64;
    let z = normal_quantile(1.0 - 1.0 / (2.0 * j * j * g * k * l * nf));
    nf.powf(-0.5 + bar_a) * j * j * g * z
}

/// `λ̄ = C′ J^{3/2} max{J^{3/2} λ̃², λ̃}`.
pub fn rate_lambda_bar(config: &ModelConfig, n: usize, bar_a: f64, c_prime: f64) -> f64 {
    let tilde = rate_lambda_tilde(config, n, bar_a);
    let j32 = (config.products() as f64).powf(1.5);
    c_prime * j32 * (j32 * tilde * tilde).max(tilde)
}

/// Rate-based penalties: `λ^γ_l = λ^μ_l / 2 = λ̄` on every row.
pub fn select_debias_penalties(config: &ModelConfig, n: usize, bar_a: f64, c_prime: f64) -> DebiasPenalties {
    let bar = rate_lambda_bar(config, n, bar_a, c_prime);
    let p = config.parameters();
    DebiasPenalties {
        lambda_gamma: vec![bar; p],
        lambda_mu: vec![2.0 * bar; p],
        bar_a,
        c_prime,
    }
}

/// How the auxiliary penalties are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyRule {
    /// [`select_debias_penalties`] with the given constants.
    Rate { bar_a: f64, c_prime: f64 },
    /// The same value on every row.
    Fixed { lambda_gamma: f64, lambda_mu: f64 },
    /// `z/√n` with `z = Φ⁻¹(1 − 1/(4·JK·L))`, times `c_gamma·‖(Ĝ')_l‖∞` for `γ̂` rows
    /// and `c_mu` for `μ̂` rows. Finite-sample alternative to the rate formula, whose
    /// universal constants are not known.
    Scaled { c_gamma: f64, c_mu: f64 },
}

impl Default for PenaltyRule {
    fn default() -> Self {
        Self::Rate {
            bar_a: 0.0,
            c_prime: 1.5,
        }
    }
}

impl PenaltyRule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Rate { bar_a, c_prime } => bar_a >= 0.0 && c_prime >= 1.0,
            Self::Fixed { lambda_gamma, lambda_mu } => lambda_gamma >= 0.0 && lambda_mu >= 0.0,
            Self::Scaled { c_gamma, c_mu } => c_gamma >= 0.0 && c_mu >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(BlpError::Config(format!("invalid debias penalty rule {self:?}")))
        }
    }

    pub fn resolve(&self, config: &ModelConfig, n: usize, g_hat: &DMatrix<f64>) -> Result<DebiasPenalties> {
        self.validate()?;
        let p = config.parameters();
        Ok(match *self {
            Self::Rate { bar_a, c_prime } => select_debias_penalties(config, n, bar_a, c_prime),
            Self::Fixed { lambda_gamma, lambda_mu } => DebiasPenalties {
                lambda_gamma: vec![lambda_gamma; p],
                lambda_mu: vec![lambda_mu; p],
                bar_a: 0.0,
                c_prime: 1.0,
            },
            Self::Scaled { c_gamma, c_mu } => scaled_penalties(config.moments(), config.attributes(), n, g_hat, c_gamma, c_mu),
        })
    }
}

/// The [`PenaltyRule::Scaled`] values; one row per column of `Ĝ`.
pub fn scaled_penalties(moments: usize, attributes: usize, n: usize, g_hat: &DMatrix<f64>, c_gamma: f64, c_mu: f64) -> DebiasPenalties {
    let base = normal_quantile(1.0 - 1.0 / (4.0 * moments as f64 * attributes as f64)) / (n as f64).sqrt();
    DebiasPenalties {
        lambda_gamma: g_hat.column_iter().map(|c| c_gamma * base * c.amax()).collect(),
        lambda_mu: vec![c_mu * base; g_hat.ncols()],
        bar_a: 0.0,
        c_prime: 1.0,
    }
}

/// Outcome of one auxiliary row LP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowStatus {
    /// Penalty actually used.
    pub lambda: f64,
    /// `‖x A − b_r‖∞ − λ`, re-computed from the solution.
    pub excess: f64,
    pub l1_norm: f64,
    /// Set when the requested penalty was infeasible and had to be raised.
    pub requested_lambda: Option<f64>,
    /// Row set to zero because even the smallest feasible penalty exceeded the cap.
    pub unidentified: bool,
}

#[derive(Clone, Debug)]
pub struct RowFit {
    pub matrix: DMatrix<f64>,
    pub rows: Vec<RowStatus>,
}

/// Relaxation of infeasible `μ̂` rows.
///
/// An infeasible row gets `λ' = (1 + margin)·t*`, `t*` the smallest feasible penalty.
/// If `t* > unidentified_cap` the row is set to zero instead, so that coordinate keeps
/// its uncorrected estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuRelaxation {
    pub margin: f64,
    pub unidentified_cap: f64,
}

impl Default for MuRelaxation {
    fn default() -> Self {
        Self {
            margin: 0.05,
            unidentified_cap: 0.5,
        }
    }
}

fn row_excess(x: &DVector<f64>, a: &DMatrix<f64>, target: &DVector<f64>, lambda: f64) -> f64 {
    ((a.transpose() * x) - target).amax() - lambda
}

fn checked_fit(
    family: RowFamilySolution,
    a: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    lambdas: &[f64],
    what: &str,
) -> Result<RowFit> {
    if let Some(&r) = family.failed_rows().first() {
        return Err(BlpError::Infeasible(format!(
            "{what} row {r} has no solution with penalty {:.3e} ({:?})",
            lambdas[r], family.solutions[r].status
        )));
    }
    let matrix = family.matrix();
    let rows = (0..matrix.nrows())
        .map(|r| status_of(&matrix, a, targets, r, lambdas[r], what))
        .collect::<Result<Vec<_>>>()?;
    Ok(RowFit { matrix, rows })
}

fn status_of(matrix: &DMatrix<f64>, a: &DMatrix<f64>, targets: &DMatrix<f64>, r: usize, lambda: f64, what: &str) -> Result<RowStatus> {
    let x = matrix.row(r).transpose();
    let excess = row_excess(&x, a, &targets.row(r).transpose(), lambda);
    if excess > ROW_SLACK_TOL {
        return Err(BlpError::Numerical(format!(
            "{what} row {r} violates its constraint by {excess:.3e}"
        )));
    }
    Ok(RowStatus {
        lambda,
        excess,
        l1_norm: x.lp_norm(1),
        requested_lambda: None,
        unidentified: false,
    })
}

/// Row `l` solves `min ‖γ_l‖₁  s.t.  ‖γ_l Ω̂ − (Ĝ')_l‖∞ ≤ λ^γ_l`.
pub fn estimate_gamma(omega: &DMatrix<f64>, g_hat: &DMatrix<f64>, lambdas: &[f64]) -> Result<RowFit> {
    if omega.nrows() != omega.ncols() || omega.nrows() != g_hat.nrows() {
        return Err(BlpError::dimension("Ω̂ size", g_hat.nrows(), omega.nrows()));
    }
    let targets = g_hat.transpose();
    let family = solve_row_family(omega, &targets, lambdas)?;
    checked_fit(family, omega, &targets, lambdas, "gamma")
}

/// Row `r` solves `min ‖μ_r‖₁  s.t.  ‖μ_r γ̂Ĝ − e_r'‖∞ ≤ λ^μ_r`; any infeasible row is an error.
pub fn estimate_mu(gamma_hat: &DMatrix<f64>, g_hat: &DMatrix<f64>, lambdas: &[f64]) -> Result<RowFit> {
    let m = mu_system(gamma_hat, g_hat)?;
    let targets = DMatrix::identity(m.nrows(), m.nrows());
    let family = solve_row_family(&m, &targets, lambdas)?;
    checked_fit(family, &m, &targets, lambdas, "mu")
}

/// [`estimate_mu`] with infeasible rows relaxed as described on [`MuRelaxation`].
pub fn estimate_mu_relaxed(
    gamma_hat: &DMatrix<f64>,
    g_hat: &DMatrix<f64>,
    lambdas: &[f64],
    relax: &MuRelaxation,
) -> Result<RowFit> {
    let m = mu_system(gamma_hat, g_hat)?;
    let p = m.nrows();
    let targets = DMatrix::identity(p, p);
    let family = solve_row_family(&m, &targets, lambdas)?;
    let mut matrix = family.matrix();
    let failed = family.failed_rows();
    let mut rows = Vec::with_capacity(p);
    let mt = m.transpose();
    for r in 0..p {
        if !failed.contains(&r) {
            rows.push(status_of(&matrix, &m, &targets, r, lambdas[r], "mu")?);
            continue;
        }
        let e_r = targets.column(r).into_owned();
        let (t_star, _) = min_relaxation(&mt, &e_r, &vec![0.0; p], p)?;
        if t_star > relax.unidentified_cap {
            matrix.row_mut(r).fill(0.0);
            rows.push(RowStatus {
                lambda: 1.0,
                excess: 0.0,
                l1_norm: 0.0,
                requested_lambda: Some(lambdas[r]),
                unidentified: true,
            });
            continue;
        }
        let lambda = lambdas[r].max((1.0 + relax.margin) * t_star);
        let single = solve_row_family(&m, &DMatrix::from_row_slice(1, p, e_r.as_slice()), &[lambda])?;
        let fit = checked_fit(single, &m, &DMatrix::from_row_slice(1, p, e_r.as_slice()), &[lambda], "mu")?;
        matrix.row_mut(r).copy_from(&fit.matrix.row(0));
        let mut status = fit.rows.into_iter().next().expect("one row");
        status.requested_lambda = Some(lambdas[r]);
        rows.push(status);
    }
    Ok(RowFit { matrix, rows })
}

fn mu_system(gamma_hat: &DMatrix<f64>, g_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if gamma_hat.ncols() != g_hat.nrows() || gamma_hat.nrows() != g_hat.ncols() {
        return Err(BlpError::dimension("γ̂ shape", g_hat.ncols(), gamma_hat.nrows()));
    }
    Ok(gamma_hat * g_hat)
}

/// `θ̂ − μ̂γ̂f̂(θ̂)`.
pub fn debiased_theta(
    theta_hat: &DVector<f64>,
    mu_hat: &DMatrix<f64>,
    gamma_hat: &DMatrix<f64>,
    f_hat: &DVector<f64>,
) -> DVector<f64> {
    theta_hat - mu_hat * (gamma_hat * f_hat)
}

/// `se_l = √(V_ll/n)` with `V = μ̂γ̂ Ω̂ γ̂'μ̂'`.
pub fn standard_errors(
    mu_hat: &DMatrix<f64>,
    gamma_hat: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    n: usize,
) -> Result<DVector<f64>> {
    let a = mu_hat * gamma_hat;
    let v = &a * omega * a.transpose();
    let mut se = DVector::zeros(v.nrows());
    for l in 0..v.nrows() {
        let d = v[(l, l)];
        if d < NEGATIVE_VARIANCE_TOL || !d.is_finite() {
            return Err(BlpError::Numerical(format!("variance of coordinate {l} is {d:.3e}")));
        }
        se[l] = (d.max(0.0) / n as f64).sqrt();
    }
    Ok(se)
}

/// `θ̂̂_l ± Φ⁻¹(1 − α/2)·se_l`.
pub fn confidence_intervals(theta_dd: &DVector<f64>, se: &DVector<f64>, alpha: f64) -> Vec<(f64, f64)> {
    let z = normal_quantile(1.0 - alpha / 2.0);
    theta_dd.iter().zip(se.iter()).map(|(&t, &s)| (t - z * s, t + z * s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebiasOptions {
    pub penalties: PenaltyRule,
    pub alpha: f64,
    /// `None` makes every infeasible `μ̂` row an error.
    pub mu_relaxation: Option<MuRelaxation>,
    pub inversion: InversionOptions,
}

impl Default for DebiasOptions {
    fn default() -> Self {
        Self {
            penalties: PenaltyRule::default(),
            alpha: 0.05,
            mu_relaxation: None,
            inversion: InversionOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DebiasResult {
    pub gamma_hat: DMatrix<f64>,
    pub mu_hat: DMatrix<f64>,
    pub theta_hat: DVector<f64>,
    pub theta_dd: DVector<f64>,
    pub se: DVector<f64>,
    pub ci: Vec<(f64, f64)>,
    pub alpha: f64,
    pub penalties: DebiasPenalties,
    pub gamma_rows: Vec<RowStatus>,
    pub mu_rows: Vec<RowStatus>,
    /// Smallest singular values of `Ω̂` and `γ̂Ĝ`.
    pub omega_min_singular: f64,
    pub gamma_g_min_singular: f64,
    pub f_hat: DVector<f64>,
    pub n: usize,
}

impl DebiasResult {
    pub fn theta_dd(&self) -> Result<Theta> {
        Theta::from_stacked(&self.theta_dd)
    }
}

fn min_singular(m: &DMatrix<f64>) -> f64 {
    m.singular_values().min()
}

/// Runs the plug-in, both LP families, the correction and the inference step.
pub fn debias(dataset: &Dataset, rule: &QuadratureRule, theta_hat: &Theta, opts: &DebiasOptions) -> Result<DebiasResult> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(BlpError::Config(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
    }
    let n = dataset.n_markets();
    let eval = evaluate(dataset, theta_hat, rule, &opts.inversion, true)?;
    let g_hat = eval.jacobian.clone().expect("jacobian requested");
    let omega = eval.omega();
    let penalties = opts.penalties.resolve(&dataset.config, n, &g_hat)?;

    let gamma = estimate_gamma(&omega, &g_hat, &penalties.lambda_gamma)?;
    let mu = match &opts.mu_relaxation {
        Some(relax) => estimate_mu_relaxed(&gamma.matrix, &g_hat, &penalties.lambda_mu, relax)?,
        None => estimate_mu(&gamma.matrix, &g_hat, &penalties.lambda_mu)?,
    };

    let theta = theta_hat.stacked();
    let theta_dd = debiased_theta(&theta, &mu.matrix, &gamma.matrix, &eval.score);
    let se = standard_errors(&mu.matrix, &gamma.matrix, &omega, n)?;
    let ci = confidence_intervals(&theta_dd, &se, opts.alpha);
    Ok(DebiasResult {
        gamma_g_min_singular: min_singular(&(&gamma.matrix * &g_hat)),
        omega_min_singular: min_singular(&omega),
        gamma_hat: gamma.matrix,
        mu_hat: mu.matrix,
        theta_hat: theta,
        theta_dd,
        se,
        ci,
        alpha: opts.alpha,
        penalties,
        gamma_rows: gamma.rows,
        mu_rows: mu.rows,
        f_hat: eval.score,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn well_conditioned(d: usize, seed: u64) -> DMatrix<f64> {
        let a = random_matrix(d, d, seed);
        &a * a.transpose() / d as f64 + DMatrix::identity(d, d)
    }

    #[test]
    fn rate_penalty_matches_quantile_oracle() {
        let cfg = ModelConfig::contiguous(100, 2, 5, 1, 3).unwrap();
        // Φ⁻¹(1 − 1/12000) = 3.764823649533926
        assert!((rate_lambda_tilde(&cfg, 100, 0.0) - 0.4 * 3.764823649533926).abs() < 1e-12);
        assert!((rate_lambda_tilde(&cfg, 100, 0.0) - 1.5059294598135704).abs() < 1e-12);
        assert!((rate_lambda_bar(&cfg, 100, 0.0, 1.0) - 18.14258830347514).abs() < 1e-10);
        let p = select_debias_penalties(&cfg, 100, 0.0, 1.0);
        assert_eq!(p.lambda_gamma.len(), 10);
        assert!(p.lambda_mu.iter().zip(&p.lambda_gamma).all(|(m, g)| *m == 2.0 * g));
    }

    #[test]
    fn single_product_single_group_structure() {
        let cfg = ModelConfig::contiguous(100, 1, 5, 1, 3).unwrap();
        for c in [1.0, 1.5, 3.0] {
            let t = rate_lambda_tilde(&cfg, 100, 0.0);
            assert!((rate_lambda_bar(&cfg, 100, 0.0, c) - c * (t * t).max(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrupling_n_halves_lambda_tilde_up_to_quantile_drift() {
        let cfg = ModelConfig::contiguous(100, 2, 5, 1, 3).unwrap();
        let ratio = rate_lambda_tilde(&cfg, 400, 0.0) / rate_lambda_tilde(&cfg, 100, 0.0);
        let drift = normal_quantile(1.0 - 1.0 / 48000.0) / normal_quantile(1.0 - 1.0 / 12000.0);
        assert!((ratio - 0.5 * drift).abs() < 1e-12);
        assert!(drift > 1.0 && drift < 1.15);
    }

    #[test]
    fn gamma_soft_thresholds_identity() {
        let fit = estimate_gamma(&DMatrix::identity(3, 3), &DMatrix::identity(3, 3), &[0.1; 3]).unwrap();
        assert!((fit.matrix - DMatrix::identity(3, 3) * 0.9).amax() < 1e-12);
    }

    #[test]
    fn gamma_zero_when_penalty_covers_targets() {
        let omega = well_conditioned(4, 1);
        let g = random_matrix(4, 3, 2);
        let lam = g.amax();
        let fit = estimate_gamma(&omega, &g, &[lam; 3]).unwrap();
        assert_eq!(fit.matrix, DMatrix::zeros(3, 4));
    }

    #[test]
    fn gamma_tends_to_dense_solve() {
        let omega = well_conditioned(5, 3);
        let g = random_matrix(5, 4, 4);
        let fit = estimate_gamma(&omega, &g, &[1e-10; 4]).unwrap();
        let oracle = g.transpose() * omega.clone().try_inverse().unwrap();
        assert!((fit.matrix - oracle).amax() < 1e-4);
    }

    #[test]
    fn gamma_infeasible_row_is_named() {
        // Ω̂ singular: rows of Ĝ' outside its range cannot be matched.
        let omega = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let err = estimate_gamma(&omega, &g, &[0.1, 0.1]).unwrap_err();
        assert!(err.to_string().contains("gamma row 1"), "{err}");
    }

    #[test]
    fn mu_soft_threshold_example() {
        let gamma = DMatrix::identity(3, 3) * 0.9;
        let fit = estimate_mu(&gamma, &DMatrix::identity(3, 3), &[0.2; 3]).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 0.8 / 0.9 } else { 0.0 };
                assert!((fit.matrix[(r, c)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mu_zero_for_unit_penalty() {
        let gamma = random_matrix(3, 4, 5);
        let g = random_matrix(4, 3, 6);
        let fit = estimate_mu(&gamma, &g, &[1.0; 3]).unwrap();
        assert_eq!(fit.matrix, DMatrix::zeros(3, 3));
    }

    #[test]
    fn mu_tends_to_inverse() {
        let gamma = random_matrix(3, 5, 7);
        let g = random_matrix(5, 3, 8);
        let fit = estimate_mu(&gamma, &g, &[1e-10; 3]).unwrap();
        let oracle = (&gamma * &g).try_inverse().unwrap();
        assert!((fit.matrix - oracle).amax() < 1e-4);
    }

    #[test]
    fn relaxation_raises_or_zeroes_rank_deficient_rows() {
        // γ̂Ĝ has rank one: e_0 is reachable only up to t* = 1/2, e_1 likewise.
        let gamma = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert!(estimate_mu(&gamma, &g, &[0.1, 0.1]).is_err());
        let relaxed = estimate_mu_relaxed(&gamma, &g, &[0.1, 0.1], &MuRelaxation { margin: 0.1, unidentified_cap: 0.9 }).unwrap();
        for row in &relaxed.rows {
            assert_eq!(row.requested_lambda, Some(0.1));
            assert!((row.lambda - 0.55).abs() < 1e-9 && !row.unidentified);
            assert!(row.excess <= ROW_SLACK_TOL);
        }
        let capped = estimate_mu_relaxed(&gamma, &g, &[0.1, 0.1], &MuRelaxation { margin: 0.1, unidentified_cap: 0.4 }).unwrap();
        assert!(capped.rows.iter().all(|r| r.unidentified));
        assert_eq!(capped.matrix, DMatrix::zeros(2, 2));
    }

    #[test]
    fn no_correction_at_exact_fit() {
        let theta = DVector::from_vec(vec![0.3, -1.0]);
        let out = debiased_theta(&theta, &random_matrix(2, 2, 9), &random_matrix(2, 3, 10), &DVector::zeros(3));
        assert_eq!(out, theta);
    }

    #[test]
    fn scalar_newton_step() {
        // f(θ) = θ − 1 at θ̂ = 0 with μ̂γ̂ = 1.
        let out = debiased_theta(
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_vec(vec![-1.0]),
        );
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn identity_standard_errors() {
        let se = standard_errors(&DMatrix::identity(3, 3), &DMatrix::identity(3, 3), &DMatrix::identity(3, 3), 100).unwrap();
        assert!(se.iter().all(|&s| (s - 0.1).abs() < 1e-15));
        let zero = standard_errors(&DMatrix::identity(3, 3), &DMatrix::identity(3, 3), &DMatrix::zeros(3, 3), 100).unwrap();
        assert_eq!(zero, DVector::zeros(3));
    }

    #[test]
    fn negative_variance_is_rejected_and_tiny_negatives_clamped() {
        let id = DMatrix::identity(2, 2);
        assert!(standard_errors(&id, &id, &(-&id), 10).is_err());
        let se = standard_errors(&id, &id, &(&id * -1e-12), 10).unwrap();
        assert_eq!(se, DVector::zeros(2));
    }

    #[test]
    fn intervals_are_symmetric() {
        let ci = confidence_intervals(&DVector::from_vec(vec![1.0, 2.0]), &DVector::from_vec(vec![0.1, 0.0]), 0.05);
        assert!((ci[0].0 - (1.0 - 0.1959963984540054)).abs() < 1e-12);
        assert!((ci[0].1 - (1.0 + 0.1959963984540054)).abs() < 1e-12);
        assert_eq!(ci[1], (2.0, 2.0));
    }

    #[test]
    fn vanishing_penalties_give_the_newton_update() {
        // Square, well-conditioned system: μ̂γ̂ → Ĝ⁻¹.
        let omega = well_conditioned(3, 11);
        let g = random_matrix(3, 3, 12) + DMatrix::identity(3, 3) * 3.0;
        let f = DVector::from_vec(vec![0.2, -0.1, 0.05]);
        let theta = DVector::from_vec(vec![1.0, 0.0, -0.5]);
        let gamma = estimate_gamma(&omega, &g, &[1e-11; 3]).unwrap();
        let mu = estimate_mu(&gamma.matrix, &g, &[1e-11; 3]).unwrap();
        let out = debiased_theta(&theta, &mu.matrix, &gamma.matrix, &f);
        let newton = &theta - g.try_inverse().unwrap() * &f;
        assert!((out - newton).amax() < 1e-4);
    }

    #[test]
    fn remainder_shrinks_in_a_linear_design() {
        // f̂(θ) = E_n[z(y − x'θ)]; the remainder is √n‖(I − μ̂γ̂Ĝ)(θ̂ − θ₀)‖∞ for a θ̂ at distance 3/√n.
        fn remainder(n: usize, seed: u64) -> f64 {
            let (p, k) = (3, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta0 = DVector::from_vec(vec![1.0, 0.0, -0.5]);
            let mut z = DMatrix::zeros(n, k);
            let mut x = DMatrix::zeros(n, p);
            let mut y = DVector::zeros(n);
            for i in 0..n {
                for c in 0..k {
                    z[(i, c)] = rng.sample(StandardNormal);
                }
                for c in 0..p {
                    let e: f64 = rng.sample(StandardNormal);
                    x[(i, c)] = z[(i, c)] + 0.5 * z[(i, c + 2)] + 0.5 * e;
                }
                let u: f64 = rng.sample(StandardNormal);
                y[i] = (x.row(i) * &theta0)[(0, 0)] + u;
            }
            let nf = n as f64;
            let theta_hat = &theta0 + DVector::from_element(p, 3.0 / nf.sqrt());
            let scores_at = |t: &DVector<f64>| {
                let resid = &y - &x * t;
                DMatrix::from_fn(n, k, |i, c| z[(i, c)] * resid[i])
            };
            let per = scores_at(&theta_hat);
            let f_hat = per.row_sum().transpose() / nf;
            let f0 = scores_at(&theta0).row_sum().transpose() / nf;
            let g = -(z.transpose() * &x) / nf;
            let omega = per.transpose() * &per / nf;
            let pen = scaled_penalties(k, p, n, &g, 0.5, 0.5);
            let gamma = estimate_gamma(&omega, &g, &pen.lambda_gamma).unwrap();
            let mu = estimate_mu(&gamma.matrix, &g, &pen.lambda_mu).unwrap();
            let dd = debiased_theta(&theta_hat, &mu.matrix, &gamma.matrix, &f_hat);
            let lin = &mu.matrix * &gamma.matrix * &f0;
            ((dd - &theta0 + lin) * nf.sqrt()).amax()
        }
        let small: Vec<f64> = (0..15).map(|s| remainder(100, s)).collect();
        let large: Vec<f64> = (0..15).map(|s| remainder(400, 100 + s)).collect();
        assert!(crate::stats::median(&large) < crate::stats::median(&small));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rows_respect_their_constraints(seed in 0u64..1000, lam in 0.01f64..0.5) {
            let omega = well_conditioned(4, seed);
            let g = random_matrix(4, 3, seed + 1);
            let gamma = estimate_gamma(&omega, &g, &[lam; 3]).unwrap();
            for (r, row) in gamma.rows.iter().enumerate() {
                prop_assert!(row.excess <= ROW_SLACK_TOL);
                let x = gamma.matrix.row(r).transpose();
                prop_assert!(((omega.transpose() * &x) - g.column(r)).amax() <= lam + ROW_SLACK_TOL);
            }
            let relaxed = estimate_mu_relaxed(&gamma.matrix, &g, &[lam; 3], &MuRelaxation::default()).unwrap();
            for row in &relaxed.rows {
                prop_assert!(row.excess <= ROW_SLACK_TOL);
                prop_assert!(row.lambda >= lam);
            }
        }

        #[test]
        fn standard_errors_are_nonnegative(seed in 0u64..1000) {
            let omega = well_conditioned(4, seed);
            let a = random_matrix(3, 4, seed + 2);
            let se = standard_errors(&DMatrix::identity(3, 3), &a, &omega, 50).unwrap();
            prop_assert!(se.iter().all(|&s| s >= 0.0 && s.is_finite()));
        }
    }
}
