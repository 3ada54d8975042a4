//! Synthetic markets with a known sparse `θ`.
//!
//! Per product, every attribute `l` has an exogenous driver `z_l ~ N(0,1)`. Attributes
//! `l ≥ 1` equal their driver; attribute 0 plays the price role and loads on the
//! demand shock, `x_0 = √(1−ρ²) z_0 + ρ η` with `ξ = σ_ξ η`. Instruments are noisy,
//! standardized copies of the drivers, `w_l = (a z_l + e_l)/√(1+a²)`, so `w ⟂ η`.
//!
//! The `K` instrument transforms of product `j` are, for `K_lin = ⌈K/2⌉` linear slots
//! and `K − K_lin` quadratic slots:
//!
//! * linear slot `k`: `w_a` with `a = (j·K_lin + k) mod L`;
//! * quadratic slot `q` with `t = j·(K − K_lin) + q`: `w_u² − 1` for even `t`
//!   (`u = t/2`), and `w_u w_{u+1}` for odd `t` (`u = (t−1)/2`), indices mod `L`.
//!
//! Linear transforms move with `β`; the squares and neighbour products move with
//! the squared group indices and so pin down `γ` up to its sign.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BlpError, Result};
use crate::model::{Dataset, MarketData, ModelConfig, Theta};
use crate::quadrature::QuadratureRule;
use crate::shares::ShareKernel;

/// Shares below this trigger a redraw of the market.
pub const SHARE_FLOOR: f64 = 1e-12;
pub const MAX_RETRIES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub model: ModelConfig,
    pub s_beta: usize,
    pub s_gamma: usize,
    #[serde(default = "default_signal")]
    pub signal: f64,
    pub xi_sd: f64,
    pub endog_corr: f64,
    #[serde(default = "default_strength")]
    pub instrument_strength: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_signal() -> f64 {
    1.0
}

fn default_strength() -> f64 {
    2.0
}

impl DgpConfig {
    /// `J=4, L=30, K=8, G=1`, three active `β` and three active `γ` at 1.0,
    /// `σ_ξ = 0.5`, `corr(x_0, ξ) = 0.5`.
    pub fn benchmark(n_markets: usize, seed: u64) -> Self {
        Self {
            model: ModelConfig::contiguous(n_markets, 4, 30, 1, 8).expect("valid benchmark dimensions"),
            s_beta: 3,
            s_gamma: 3,
            signal: 1.0,
            xi_sd: 0.5,
            endog_corr: 0.5,
            instrument_strength: default_strength(),
            seed,
        }
    }

    pub fn with_markets(&self, n_markets: usize) -> Result<Self> {
        Ok(Self {
            model: self.model.with_markets(n_markets)?,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.model.attributes();
        if self.s_beta > l || self.s_gamma > l {
            return Err(BlpError::Config(format!(
                "support sizes ({}, {}) exceed L = {l}",
                self.s_beta, self.s_gamma
            )));
        }
        if !(self.endog_corr.abs() < 1.0) {
            return Err(BlpError::Config("endog_corr must lie in (-1, 1)".into()));
        }
        if !(self.xi_sd >= 0.0 && self.xi_sd.is_finite()) {
            return Err(BlpError::Config("xi_sd must be finite and nonnegative".into()));
        }
        if !(self.signal.is_finite() && self.instrument_strength.is_finite()) {
            return Err(BlpError::Config("signal and instrument_strength must be finite".into()));
        }
        Ok(())
    }

    pub fn theta_true(&self) -> Theta {
        let l = self.model.attributes();
        Theta {
            beta: DVector::from_fn(l, |i, _| if i < self.s_beta { self.signal } else { 0.0 }),
            gamma: DVector::from_fn(l, |i, _| if i < self.s_gamma { self.signal } else { 0.0 }),
        }
    }
}

/// Instrument transform `k` of product `j`, as attribute pairs: `(a, None)` is `w_a`,
/// `(a, Some(a))` is `w_a² − 1`, `(a, Some(b))` is `w_a w_b`.
pub fn instrument_map(j: usize, k: usize, attributes: usize, instruments: usize) -> (usize, Option<usize>) {
    let k_lin = instruments.div_ceil(2);
    if k < k_lin {
        return ((j * k_lin + k) % attributes, None);
    }
    let k_quad = instruments - k_lin;
    let t = j * k_quad + (k - k_lin);
    let u = t / 2;
    if t % 2 == 0 {
        (u % attributes, Some(u % attributes))
    } else {
        (u % attributes, Some((u + 1) % attributes))
    }
}

/// Draws a dataset and returns it with the true parameter.
pub fn simulate(cfg: &DgpConfig, rule: &QuadratureRule) -> Result<(Dataset, Theta)> {
    cfg.validate()?;
    let theta = cfg.theta_true();
    let markets = (0..cfg.model.n_markets())
        .into_par_iter()
        .map(|i| simulate_market(cfg, &theta, rule, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset::new(cfg.model.clone(), markets)?, theta))
}

fn simulate_market(cfg: &DgpConfig, theta: &Theta, rule: &QuadratureRule, market: usize) -> Result<MarketData> {
    for attempt in 0..=MAX_RETRIES {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(((attempt as u64) << 48) | market as u64);
        let draw = draw_market(cfg, theta, rule, &mut rng)?;
        let smallest = draw.shares.min().min(draw.outside_share());
        if smallest >= SHARE_FLOOR {
            return Ok(draw);
        }
        log::warn!("market {market}: share {smallest:.3e} below floor, redrawing (attempt {})", attempt + 1);
    }
    Err(BlpError::Numerical(format!(
        "market {market}: shares underflow after {MAX_RETRIES} redraws"
    )))
}

fn draw_market(cfg: &DgpConfig, theta: &Theta, rule: &QuadratureRule, rng: &mut ChaCha20Rng) -> Result<MarketData> {
    let model = &cfg.model;
    let (jn, ln, kn) = (model.products(), model.attributes(), model.instruments());
    let rho = cfg.endog_corr;
    let a = cfg.instrument_strength;
    let norm = (1.0 + a * a).sqrt();
    let mut normal = || -> f64 { StandardNormal.sample(rng) };

    let mut x = DMatrix::zeros(jn, ln);
    let mut w = DMatrix::zeros(jn, ln);
    let mut xi = DVector::zeros(jn);
    for j in 0..jn {
        let eta = normal();
        xi[j] = cfg.xi_sd * eta;
        for l in 0..ln {
            let z = normal();
            let e = normal();
            x[(j, l)] = if l == 0 { (1.0 - rho * rho).sqrt() * z + rho * eta } else { z };
            w[(j, l)] = (a * z + e) / norm;
        }
    }
    let instruments = DMatrix::from_fn(jn, kn, |j, k| match instrument_map(j, k, ln, kn) {
        (p, None) => w[(j, p)],
        (p, Some(q)) if p == q => w[(j, p)] * w[(j, p)] - 1.0,
        (p, Some(q)) => w[(j, p)] * w[(j, q)],
    });

    let delta = &x * &theta.beta + &xi;
    let mut market = MarketData::new(x, DVector::zeros(jn), instruments);
    let kernel = ShareKernel::new(&market, &theta.gamma, model, rule)?;
    market.shares = kernel.shares(&delta);
    market.xi_true = Some(xi);
    Ok(market)
}

/// Plain-logit inversion `δ_j = ln S_j − ln S₀`.
pub fn closed_form_logit_delta(shares: &DVector<f64>) -> DVector<f64> {
    let log_outside = (1.0 - shares.sum()).ln();
    shares.map(|s| s.ln() - log_outside)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::default_rule;

    fn small(n: usize, xi_sd: f64) -> DgpConfig {
        DgpConfig {
            model: ModelConfig::contiguous(n, 3, 6, 1, 4).unwrap(),
            s_beta: 2,
            s_gamma: 2,
            signal: 1.0,
            xi_sd,
            endog_corr: 0.5,
            instrument_strength: 2.0,
            seed: 7,
        }
    }

    #[test]
    fn closed_form_examples() {
        let d = closed_form_logit_delta(&DVector::from_vec(vec![0.3, 0.2]));
        assert!((d[0] + 0.5108256).abs() < 1e-7);
        assert!((d[1] + 0.9162907).abs() < 1e-7);
        let u = closed_form_logit_delta(&DVector::from_vec(vec![0.25, 0.25]));
        assert!((u[0] + 0.6931472).abs() < 1e-7 && (u[1] + 0.6931472).abs() < 1e-7);
    }

    #[test]
    fn closed_form_inverts_plain_logit() {
        let delta = DVector::from_vec(vec![0.4, -1.2, 2.0]);
        let e = delta.map(f64::exp);
        let s = &e / (1.0 + e.sum());
        let back = closed_form_logit_delta(&s);
        assert!((back - delta).amax() < 1e-14);
    }

    #[test]
    fn same_seed_same_bits() {
        let rule = default_rule(1);
        let (a, _) = simulate(&small(30, 0.5), &rule).unwrap();
        let (b, _) = simulate(&small(30, 0.5), &rule).unwrap();
        assert_eq!(a, b);
        let mut other = small(30, 0.5);
        other.seed = 8;
        assert_ne!(simulate(&other, &rule).unwrap().0, a);
    }

    #[test]
    fn markets_do_not_depend_on_panel_size() {
        let rule = default_rule(1);
        let (short, _) = simulate(&small(5, 0.5), &rule).unwrap();
        let (long, _) = simulate(&small(20, 0.5), &rule).unwrap();
        assert_eq!(short.markets[..], long.markets[..5]);
    }

    #[test]
    fn zero_gamma_gives_plain_logit_shares() {
        let mut cfg = small(20, 0.5);
        cfg.s_gamma = 0;
        let rule = default_rule(1);
        let (ds, theta) = simulate(&cfg, &rule).unwrap();
        for m in &ds.markets {
            let delta = &m.x * &theta.beta + m.xi_true.as_ref().unwrap();
            let e = delta.map(f64::exp);
            let logit = &e / (1.0 + e.sum());
            assert!((&m.shares - logit).amax() < 1e-12);
        }
    }

    #[test]
    fn generated_markets_satisfy_share_invariants() {
        let rule = default_rule(1);
        let (ds, _) = simulate(&small(50, 0.5), &rule).unwrap();
        assert!(crate::model::validate_dataset(&ds).is_empty());
    }

    #[test]
    fn instruments_are_orthogonal_to_xi_at_clt_rate() {
        let n = 10_000;
        let cfg = small(n, 0.5);
        let rule = default_rule(1);
        let (ds, _) = simulate(&cfg, &rule).unwrap();
        let kn = cfg.model.instruments();
        for j in 0..cfg.model.products() {
            for k in 0..kn {
                let vals: Vec<f64> = ds.markets.iter().map(|m| m.instruments[(j, k)]).collect();
                let xis: Vec<f64> = ds.markets.iter().map(|m| m.xi_true.as_ref().unwrap()[j]).collect();
                let mean_h = vals.iter().sum::<f64>() / n as f64;
                let sd_h = (vals.iter().map(|v| (v - mean_h).powi(2)).sum::<f64>() / n as f64).sqrt();
                let moment = vals.iter().zip(&xis).map(|(h, x)| h * x).sum::<f64>() / n as f64;
                assert!(moment.abs() < 4.0 * cfg.xi_sd * sd_h / (n as f64).sqrt(), "j={j} k={k}: {moment}");
            }
        }
    }

    #[test]
    fn instrument_map_layout() {
        // K = 8: four linear slots, then squares and neighbour products.
        assert_eq!(instrument_map(0, 0, 30, 8), (0, None));
        assert_eq!(instrument_map(1, 3, 30, 8), (7, None));
        assert_eq!(instrument_map(0, 4, 30, 8), (0, Some(0)));
        assert_eq!(instrument_map(0, 5, 30, 8), (0, Some(1)));
        assert_eq!(instrument_map(3, 7, 30, 8), (7, Some(8)));
        assert_eq!(instrument_map(0, 0, 1, 1), (0, None));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(5, 0.5);
        cfg.s_beta = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = small(5, 0.5);
        cfg.endog_corr = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small(5, 0.5);
        cfg.xi_sd = -1.0;
        assert!(cfg.validate().is_err());
    }
}
