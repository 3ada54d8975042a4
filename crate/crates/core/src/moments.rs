//! GMM objects: structural residuals, the score `f̂(θ)`, its Jacobian `Ĝ(θ)` and `Ω̂(θ)`.
//!
//! Moment `(j, k)` lives at index `j·K + k`. Parameters are ordered `(β, γ)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BlpError, Result};
use crate::model::{Dataset, MarketData, ModelConfig, Theta};
use crate::quadrature::QuadratureRule;
use crate::shares::{InversionOptions, ShareKernel};

/// `f̂(θ) ∈ R^{JK}`.
pub type MomentVector = DVector<f64>;
/// `Ĝ(θ) ∈ R^{JK×2L}`.
pub type JacobianMatrix = DMatrix<f64>;
/// `Ω̂(θ) ∈ R^{JK×JK}`.
pub type WeightMatrix = DMatrix<f64>;

/// Per-market residuals and optional derivative `∂ξ/∂γ` (J×L).
#[derive(Clone, Debug)]
pub struct MarketMoments {
    pub xi: DVector<f64>,
    pub scores: DVector<f64>,
    pub dxi_dgamma: Option<DMatrix<f64>>,
    pub inversion_residual: f64,
    pub inversion_iterations: usize,
    pub band_violations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InversionSummary {
    pub max_residual: f64,
    pub max_iters_used: usize,
    pub band_violations: usize,
}

/// Score, per-market scores (n×JK) and, on request, the Jacobian at one `θ`.
#[derive(Clone, Debug)]
pub struct MomentEvaluation {
    pub score: MomentVector,
    pub per_market: DMatrix<f64>,
    pub jacobian: Option<JacobianMatrix>,
    pub inversion: InversionSummary,
}

impl MomentEvaluation {
    pub fn sup_norm(&self) -> f64 {
        self.score.amax()
    }

    pub fn omega(&self) -> WeightMatrix {
        omega_from_scores(&self.per_market)
    }
}

pub fn market_moments(
    market: &MarketData,
    theta: &Theta,
    rule: &QuadratureRule,
    opts: &InversionOptions,
    config: &ModelConfig,
    with_derivative: bool,
) -> Result<MarketMoments> {
    let kernel = ShareKernel::new(market, &theta.gamma, config, rule)?;
    let inv = kernel.invert(&market.shares, opts)?;
    let xi = &inv.delta - &market.x * &theta.beta;

    let (jn, kn) = (config.products(), config.instruments());
    let mut scores = DVector::zeros(jn * kn);
    for j in 0..jn {
        for k in 0..kn {
            scores[j * kn + k] = xi[j] * market.instruments[(j, k)];
        }
    }

    let dxi_dgamma = if with_derivative {
        Some(delta_gamma_derivative(&kernel, market, &inv.delta, config)?)
    } else {
        None
    };

    Ok(MarketMoments {
        xi,
        scores,
        dxi_dgamma,
        inversion_residual: inv.residual,
        inversion_iterations: inv.iterations,
        band_violations: inv.band_violations,
    })
}

/// `∂δ/∂γ = −(∂s/∂δ)⁻¹ ∂s/∂γ` by the implicit function theorem, with
/// `∂s_j/∂γ_l = ∫ β̃_{g(l)} s_j (x_jl − Σ_j' s_j' x_j'l) dF`.
fn delta_gamma_derivative(
    kernel: &ShareKernel<'_>,
    market: &MarketData,
    delta: &DVector<f64>,
    config: &ModelConfig,
) -> Result<DMatrix<f64>> {
    let rule = kernel.rule();
    let (jn, ln) = (config.products(), config.attributes());
    let node_shares = kernel.node_shares(delta);
    let mut ds_dgamma = DMatrix::zeros(jn, ln);
    let mut ds_ddelta = DMatrix::zeros(jn, jn);
    let mut xbar = vec![0.0; ln];
    for (m, &w) in rule.weights.iter().enumerate() {
        let s = node_shares.column(m);
        for (l, slot) in xbar.iter_mut().enumerate() {
            *slot = (0..jn).map(|j| s[j] * market.x[(j, l)]).sum();
        }
        for j in 0..jn {
            let ws = w * s[j];
            ds_ddelta[(j, j)] += ws;
            for b in 0..jn {
                ds_ddelta[(j, b)] -= ws * s[b];
            }
            for l in 0..ln {
                let draw = rule.nodes[(m, config.group_of(l))];
                ds_dgamma[(j, l)] += ws * draw * (market.x[(j, l)] - xbar[l]);
            }
        }
    }
    let lu = ds_ddelta.lu();
    let solved = lu
        .solve(&ds_dgamma)
        .filter(|m: &DMatrix<f64>| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| BlpError::Singular("share Jacobian ∂s/∂δ".into()))?;
    Ok(-solved)
}

/// `ξ = s⁻¹(S; γ) − Xβ` for one market.
pub fn xi_residuals(
    market: &MarketData,
    theta: &Theta,
    rule: &QuadratureRule,
    opts: &InversionOptions,
    config: &ModelConfig,
) -> Result<DVector<f64>> {
    Ok(market_moments(market, theta, rule, opts, config, false)?.xi)
}

/// Evaluates every market in parallel and reduces in market order.
pub fn evaluate(
    dataset: &Dataset,
    theta: &Theta,
    rule: &QuadratureRule,
    opts: &InversionOptions,
    with_jacobian: bool,
) -> Result<MomentEvaluation> {
    let config = &dataset.config;
    if theta.attributes() != config.attributes() {
        return Err(BlpError::dimension("theta", config.attributes(), theta.attributes()));
    }
    let n = dataset.n_markets();
    if n == 0 {
        return Err(BlpError::Data("dataset has no markets".into()));
    }
    let per: Vec<MarketMoments> = dataset
        .markets
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            market_moments(m, theta, rule, opts, config, with_jacobian).map_err(|e| match e {
                BlpError::Inversion {
                    residual, iterations, ..
                } => BlpError::Inversion {
                    market: i,
                    residual,
                    iterations,
                },
                BlpError::Singular(what) => BlpError::Singular(format!("{what} in market {i}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (jn, kn, ln) = (config.products(), config.instruments(), config.attributes());
    let nf = n as f64;
    let mut per_market = DMatrix::zeros(n, jn * kn);
    let mut score = DVector::zeros(jn * kn);
    let mut summary = InversionSummary::default();
    for (i, mm) in per.iter().enumerate() {
        per_market.row_mut(i).copy_from(&mm.scores.transpose());
        score += &mm.scores;
        summary.max_residual = summary.max_residual.max(mm.inversion_residual);
        summary.max_iters_used = summary.max_iters_used.max(mm.inversion_iterations);
        summary.band_violations += mm.band_violations;
    }
    score /= nf;

    let jacobian = if with_jacobian {
        let mut jac = DMatrix::zeros(jn * kn, 2 * ln);
        for (mm, market) in per.iter().zip(&dataset.markets) {
            let dxi = mm.dxi_dgamma.as_ref().expect("derivative requested");
            for j in 0..jn {
                for k in 0..kn {
                    let h = market.instruments[(j, k)];
                    let row = j * kn + k;
                    for l in 0..ln {
                        jac[(row, l)] -= h * market.x[(j, l)];
                        jac[(row, ln + l)] += h * dxi[(j, l)];
                    }
                }
            }
        }
        jac /= nf;
        Some(jac)
    } else {
        None
    };

    Ok(MomentEvaluation {
        score,
        per_market,
        jacobian,
        inversion: summary,
    })
}

/// `f̂_{jk}(θ) = (1/n) Σ_i ξ_ij(θ) h_jk(w_ij)`.
pub fn score(
    dataset: &Dataset,
    theta: &Theta,
    rule: &QuadratureRule,
    opts: &InversionOptions,
) -> Result<MomentVector> {
    Ok(evaluate(dataset, theta, rule, opts, false)?.score)
}

pub fn jacobian_theta(
    dataset: &Dataset,
    theta: &Theta,
    rule: &QuadratureRule,
    opts: &InversionOptions,
) -> Result<JacobianMatrix> {
    Ok(evaluate(dataset, theta, rule, opts, true)?
        .jacobian
        .expect("requested"))
}

/// Uncentered `Ω̂ = (1/n) Σ_i f_i f_i'`.
pub fn omega(
    dataset: &Dataset,
    theta: &Theta,
    rule: &QuadratureRule,
    opts: &InversionOptions,
) -> Result<WeightMatrix> {
    Ok(evaluate(dataset, theta, rule, opts, false)?.omega())
}

pub fn omega_from_scores(per_market: &DMatrix<f64>) -> WeightMatrix {
    let n = per_market.nrows().max(1) as f64;
    let mut out = per_market.transpose() * per_market / n;
    // exact symmetry
    let d = out.nrows();
    for a in 0..d {
        for b in 0..a {
            let v = 0.5 * (out[(a, b)] + out[(b, a)]);
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}
