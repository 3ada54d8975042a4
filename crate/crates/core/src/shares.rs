//! Mixed-logit shares, their derivative in mean utilities, and share inversion.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BlpError, Result};
use crate::model::{group_indices, MarketData, ModelConfig, Theta};
use crate::quadrature::QuadratureRule;

/// Mean utilities `δ_j = x_j'β + ξ_j` of one market.
pub type DeltaVector = DVector<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionOptions {
    /// Stop once `‖log S − log s(δ)‖∞` falls below this.
    pub contraction_tol: f64,
    pub max_contraction_iters: usize,
    /// Residual below which the contraction hands over to Newton.
    pub newton_switch_tol: f64,
    /// Diagnostic band `c1/J ≤ s_j ≤ c2/J`; inactive at the defaults.
    pub share_floor_c1: f64,
    #[serde(with = "crate::serde_util::nonfinite")]
    pub share_cap_c2: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            contraction_tol: 1e-13,
            max_contraction_iters: 2000,
            newton_switch_tol: 1e-4,
            share_floor_c1: 0.0,
            share_cap_c2: f64::INFINITY,
        }
    }
}

impl InversionOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.contraction_tol > 0.0 && self.newton_switch_tol > 0.0) {
            return Err(BlpError::Config("inversion tolerances must be positive".into()));
        }
        if self.share_floor_c1 < 0.0 || self.share_floor_c1 > self.share_cap_c2 {
            return Err(BlpError::Config("share band needs 0 ≤ c1 ≤ c2".into()));
        }
        Ok(())
    }

    fn band_active(&self) -> bool {
        self.share_floor_c1 > 0.0 || self.share_cap_c2.is_finite()
    }
}

/// Outcome of [`invert_shares`].
#[derive(Clone, Debug)]
pub struct Inversion {
    pub delta: DeltaVector,
    pub iterations: usize,
    pub newton_steps: usize,
    pub residual: f64,
    /// Log-share residual after each contraction step.
    pub contraction_residuals: Vec<f64>,
    /// Products whose integrated share left the `[c1/J, c2/J]` band.
    pub band_violations: usize,
}

/// Heterogeneous utility terms `Σ_g ν_jg β̃_mg` for every product and node of a rule.
///
/// Built once per (market, γ) and reused for every δ evaluated at that γ.
#[derive(Clone, Debug)]
pub struct ShareKernel<'a> {
    het: DMatrix<f64>,
    rule: &'a QuadratureRule,
}

impl<'a> ShareKernel<'a> {
    pub fn new(
        market: &MarketData,
        gamma: &DVector<f64>,
        config: &ModelConfig,
        rule: &'a QuadratureRule,
    ) -> Result<Self> {
        market.check(config)?;
        if gamma.len() != config.attributes() {
            return Err(BlpError::dimension("gamma", config.attributes(), gamma.len()));
        }
        if rule.dimension() != config.groups() {
            return Err(BlpError::dimension("quadrature dimension", config.groups(), rule.dimension()));
        }
        let nu = group_indices(market, gamma, config);
        // J×G times G×M
        let het = nu * rule.nodes.transpose();
        Ok(Self { het, rule })
    }

    pub fn products(&self) -> usize {
        self.het.nrows()
    }

    pub fn nodes(&self) -> usize {
        self.het.ncols()
    }

    pub fn rule(&self) -> &QuadratureRule {
        self.rule
    }

    /// Conditional shares at every node, written column-wise into a J×M matrix.
    pub fn node_shares(&self, delta: &DVector<f64>) -> DMatrix<f64> {
        let (jn, mn) = self.het.shape();
        let mut out = DMatrix::zeros(jn, mn);
        let mut u = vec![0.0; jn];
        for m in 0..mn {
            let col = self.het.column(m);
            for j in 0..jn {
                u[j] = delta[j] + col[j];
            }
            logit_into(&u, out.column_mut(m).as_mut_slice());
        }
        out
    }

    pub fn shares(&self, delta: &DVector<f64>) -> DVector<f64> {
        let jn = self.products();
        let mut u = vec![0.0; jn];
        let mut s = vec![0.0; jn];
        let mut acc = DVector::zeros(jn);
        for (m, w) in self.rule.weights.iter().enumerate() {
            let col = self.het.column(m);
            for j in 0..jn {
                u[j] = delta[j] + col[j];
            }
            logit_into(&u, &mut s);
            for j in 0..jn {
                acc[j] += w * s[j];
            }
        }
        acc
    }

    /// Mixed shares together with `∂s/∂δ = ∫ diag(s) − s s' dF`.
    pub fn shares_and_jacobian(&self, delta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let jn = self.products();
        let mut u = vec![0.0; jn];
        let mut s = vec![0.0; jn];
        let mut acc = DVector::zeros(jn);
        let mut jac = DMatrix::zeros(jn, jn);
        for (m, w) in self.rule.weights.iter().enumerate() {
            let col = self.het.column(m);
            for j in 0..jn {
                u[j] = delta[j] + col[j];
            }
            logit_into(&u, &mut s);
            for a in 0..jn {
                acc[a] += w * s[a];
                let ws = w * s[a];
                jac[(a, a)] += ws;
                for b in 0..jn {
                    jac[(a, b)] -= ws * s[b];
                }
            }
        }
        (acc, jac)
    }

    /// Inverts observed shares into mean utilities: BLP contraction, then damped Newton.
    pub fn invert(&self, observed: &DVector<f64>, opts: &InversionOptions) -> Result<Inversion> {
        let jn = self.products();
        if observed.len() != jn {
            return Err(BlpError::dimension("observed shares", jn, observed.len()));
        }
        let outside = 1.0 - observed.sum();
        if observed.iter().any(|&s| !(s > 0.0 && s < 1.0)) || !(outside > 0.0) {
            return Err(BlpError::Data("observed shares must lie in the open simplex".into()));
        }
        let log_s: DVector<f64> = observed.map(f64::ln);
        let mut delta = &log_s - DVector::from_element(jn, outside.ln());

        let residual_of = |d: &DVector<f64>| -> (DVector<f64>, f64) {
            let r = &log_s - self.shares(d).map(f64::ln);
            let norm = sup_norm(&r);
            (r, norm)
        };

        let mut iterations = 0;
        let mut newton_steps = 0;
        let (mut r, mut norm) = residual_of(&delta);
        let mut trace = Vec::new();

        // Contraction phase; a stalled contraction also hands over to Newton.
        while norm > opts.newton_switch_tol && norm > opts.contraction_tol && iterations < opts.max_contraction_iters {
            delta += &r;
            iterations += 1;
            let prev = norm;
            (r, norm) = residual_of(&delta);
            trace.push(norm);
            if !norm.is_finite() {
                break;
            }
            if iterations >= 25 && norm > 0.95 * prev {
                break;
            }
        }

        while norm.is_finite() && norm > opts.contraction_tol && iterations < opts.max_contraction_iters {
            iterations += 1;
            let (s, jac) = self.shares_and_jacobian(&delta);
            let rhs = r.component_mul(&s);
            let step = jac.lu().solve(&rhs);
            let mut accepted = false;
            if let Some(step) = step.filter(|st| st.iter().all(|v| v.is_finite())) {
                let mut scale = 1.0;
                for _ in 0..30 {
                    let trial = &delta + &step * scale;
                    let (tr, tn) = residual_of(&trial);
                    if tn.is_finite() && tn < norm {
                        delta = trial;
                        r = tr;
                        norm = tn;
                        accepted = true;
                        newton_steps += 1;
                        break;
                    }
                    scale *= 0.5;
                }
            }
            if !accepted {
                let trial = &delta + &r;
                let (tr, tn) = residual_of(&trial);
                if !(tn.is_finite() && tn < norm) {
                    break;
                }
                delta = trial;
                r = tr;
                norm = tn;
            }
        }

        if !(norm.is_finite() && norm <= opts.contraction_tol) || delta.iter().any(|v| !v.is_finite()) {
            return Err(BlpError::Inversion {
                market: 0,
                residual: norm,
                iterations,
            });
        }

        let band_violations = if opts.band_active() {
            let lo = opts.share_floor_c1 / jn as f64;
            let hi = opts.share_cap_c2 / jn as f64;
            self.shares(&delta).iter().filter(|&&s| s < lo || s > hi).count()
        } else {
            0
        };

        Ok(Inversion {
            delta,
            iterations,
            newton_steps,
            residual: norm,
            contraction_residuals: trace,
            band_violations,
        })
    }
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| if x.is_nan() { f64::NAN } else { acc.max(x.abs()) })
}

/// Logit shares with an outside option of utility zero, overflow-safe.
fn logit_into(u: &[f64], out: &mut [f64]) {
    let top = u.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut denom = (-top).exp();
    for (o, &v) in out.iter_mut().zip(u) {
        *o = (v - top).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

/// Logit shares at a single taste draw `β̃`.
pub fn conditional_share(
    market: &MarketData,
    theta: &Theta,
    delta: &DVector<f64>,
    beta_tilde: &[f64],
    config: &ModelConfig,
) -> Result<DVector<f64>> {
    market.check(config)?;
    if beta_tilde.len() != config.groups() {
        return Err(BlpError::dimension("beta_tilde", config.groups(), beta_tilde.len()));
    }
    if delta.len() != config.products() {
        return Err(BlpError::dimension("delta", config.products(), delta.len()));
    }
    let nu = group_indices(market, &theta.gamma, config);
    let u: Vec<f64> = (0..config.products())
        .map(|j| delta[j] + (0..config.groups()).map(|g| nu[(j, g)] * beta_tilde[g]).sum::<f64>())
        .collect();
    let mut out = vec![0.0; u.len()];
    logit_into(&u, &mut out);
    Ok(DVector::from_vec(out))
}

pub fn mixed_share(
    market: &MarketData,
    theta: &Theta,
    delta: &DVector<f64>,
    rule: &QuadratureRule,
    config: &ModelConfig,
) -> Result<DVector<f64>> {
    if delta.len() != config.products() {
        return Err(BlpError::dimension("delta", config.products(), delta.len()));
    }
    Ok(ShareKernel::new(market, &theta.gamma, config, rule)?.shares(delta))
}

pub fn share_jacobian_delta(
    market: &MarketData,
    theta: &Theta,
    delta: &DVector<f64>,
    rule: &QuadratureRule,
    config: &ModelConfig,
) -> Result<DMatrix<f64>> {
    if delta.len() != config.products() {
        return Err(BlpError::dimension("delta", config.products(), delta.len()));
    }
    Ok(ShareKernel::new(market, &theta.gamma, config, rule)?.shares_and_jacobian(delta).1)
}

/// Mean utilities reproducing `observed` shares at the given `γ`; `β` is not used.
pub fn invert_shares(
    market: &MarketData,
    observed: &DVector<f64>,
    theta: &Theta,
    rule: &QuadratureRule,
    opts: &InversionOptions,
    config: &ModelConfig,
) -> Result<Inversion> {
    opts.validate()?;
    ShareKernel::new(market, &theta.gamma, config, rule)?.invert(observed, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{gauss_hermite_rule, monte_carlo_rule};
    use approx::assert_relative_eq;

    fn setup(j: usize, l: usize, g: usize) -> (MarketData, ModelConfig) {
        let cfg = ModelConfig::contiguous(1, j, l, g, 1).unwrap();
        let x = DMatrix::from_fn(j, l, |a, b| ((a * 13 + b * 7 + 1) as f64).sin());
        let m = MarketData::new(x, DVector::from_element(j, 0.1), DMatrix::from_element(j, 1, 1.0));
        (m, cfg)
    }

    fn theta_with_gamma(l: usize, scale: f64) -> Theta {
        Theta::new(
            DVector::zeros(l),
            DVector::from_fn(l, |i, _| scale * (1.0 + 0.3 * i as f64) * if i % 2 == 0 { 1.0 } else { -1.0 }),
        )
        .unwrap()
    }

    #[test]
    fn single_product_at_zero_is_one_half() {
        let (m, cfg) = setup(1, 1, 1);
        let s = conditional_share(&m, &Theta::zeros(1), &DVector::zeros(1), &[0.7], &cfg).unwrap();
        assert_eq!(s[0], 0.5);
    }

    #[test]
    fn very_negative_utilities_leave_everything_outside() {
        let (m, cfg) = setup(3, 2, 1);
        let s = conditional_share(&m, &theta_with_gamma(2, 1.0), &DVector::from_element(3, -1e6), &[1.0], &cfg).unwrap();
        assert!(s.iter().all(|&v| v >= 0.0 && v < 1e-300));
        assert_eq!(1.0 - s.sum(), 1.0);
    }

    #[test]
    fn huge_utilities_do_not_overflow() {
        let (m, cfg) = setup(2, 2, 1);
        let s = conditional_share(&m, &Theta::zeros(2), &DVector::from_vec(vec![800.0, 800.0]), &[0.0], &cfg).unwrap();
        assert_relative_eq!(s[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_two_product_logit() {
        let (m, cfg) = setup(2, 2, 1);
        let s = conditional_share(&m, &Theta::zeros(2), &DVector::from_vec(vec![1.0, 1.0]), &[0.3], &cfg).unwrap();
        let e = 1f64.exp();
        assert_relative_eq!(s[0], e / (1.0 + 2.0 * e), epsilon = 1e-15);
        assert_relative_eq!(s[1], 0.42232, epsilon = 1e-5);
    }

    #[test]
    fn no_heterogeneity_means_constant_integrand() {
        let (m, cfg) = setup(3, 2, 1);
        let rule = gauss_hermite_rule(1, 7).unwrap();
        let delta = DVector::from_vec(vec![0.2, -0.4, 1.0]);
        let mixed = mixed_share(&m, &Theta::zeros(2), &delta, &rule, &cfg).unwrap();
        let cond = conditional_share(&m, &Theta::zeros(2), &delta, &[1.3], &cfg).unwrap();
        assert!((mixed - cond).amax() < 1e-15);
    }

    #[test]
    fn symmetric_heterogeneity_gives_one_half() {
        let cfg = ModelConfig::contiguous(1, 1, 1, 1, 1).unwrap();
        let m = MarketData::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 0.5), DMatrix::from_element(1, 1, 1.0));
        let theta = Theta::new(DVector::zeros(1), DVector::from_element(1, 1.0)).unwrap();
        let rule = gauss_hermite_rule(1, 15).unwrap();
        let s = mixed_share(&m, &theta, &DVector::zeros(1), &rule, &cfg).unwrap();
        assert_relative_eq!(s[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gauss_hermite_and_monte_carlo_agree() {
        for g in 1..=3 {
            let (m, cfg) = setup(4, 6, g);
            let theta = theta_with_gamma(6, 0.4);
            let delta = DVector::from_vec(vec![-1.0, 0.5, 0.0, -0.3]);
            let gh = mixed_share(&m, &theta, &delta, &gauss_hermite_rule(g, 15).unwrap(), &cfg).unwrap();
            let mc = mixed_share(&m, &theta, &delta, &monte_carlo_rule(g, 100_000, 5).unwrap(), &cfg).unwrap();
            assert!((gh - mc).amax() < 5e-3, "G={g}");
        }
    }

    #[test]
    fn logit_jacobian_closed_form() {
        let (m, cfg) = setup(1, 1, 1);
        let rule = gauss_hermite_rule(1, 5).unwrap();
        let jac = share_jacobian_delta(&m, &Theta::zeros(1), &DVector::zeros(1), &rule, &cfg).unwrap();
        assert_relative_eq!(jac[(0, 0)], 0.25, epsilon = 1e-15);

        let (m, cfg) = setup(2, 1, 1);
        let delta = DVector::from_vec(vec![0.3, -0.7]);
        let jac = share_jacobian_delta(&m, &Theta::zeros(1), &delta, &rule, &cfg).unwrap();
        let s = conditional_share(&m, &Theta::zeros(1), &delta, &[0.0], &cfg).unwrap();
        assert_relative_eq!(jac[(0, 0)], s[0] * (1.0 - s[0]), epsilon = 1e-15);
        assert_relative_eq!(jac[(1, 1)], s[1] * (1.0 - s[1]), epsilon = 1e-15);
        assert_relative_eq!(jac[(0, 1)], -s[0] * s[1], epsilon = 1e-15);
        assert_relative_eq!(jac[(1, 0)], -s[0] * s[1], epsilon = 1e-15);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let (m, cfg) = setup(4, 5, 2);
        let theta = theta_with_gamma(5, 0.6);
        let rule = gauss_hermite_rule(2, 9).unwrap();
        let delta = DVector::from_vec(vec![-0.5, 0.1, -1.2, 0.4]);
        let jac = share_jacobian_delta(&m, &theta, &delta, &rule, &cfg).unwrap();
        let h = 1e-6;
        for b in 0..4 {
            let mut up = delta.clone();
            let mut dn = delta.clone();
            up[b] += h;
            dn[b] -= h;
            let fd = (mixed_share(&m, &theta, &up, &rule, &cfg).unwrap() - mixed_share(&m, &theta, &dn, &rule, &cfg).unwrap()) / (2.0 * h);
            for a in 0..4 {
                let rel = (fd[a] - jac[(a, b)]).abs() / jac[(a, b)].abs().max(1e-3);
                assert!(rel < 1e-6, "({a},{b}): fd {} vs {}", fd[a], jac[(a, b)]);
            }
        }
    }

    #[test]
    fn jacobian_structure() {
        let (m, cfg) = setup(5, 4, 1);
        let theta = theta_with_gamma(4, 1.0);
        let rule = gauss_hermite_rule(1, 11).unwrap();
        let delta = DVector::from_vec(vec![0.5, -0.5, 1.0, 0.0, -2.0]);
        let jac = share_jacobian_delta(&m, &theta, &delta, &rule, &cfg).unwrap();
        assert!((jac.clone() - jac.transpose()).amax() < 1e-15);
        for a in 0..5 {
            let off: f64 = (0..5).filter(|&b| b != a).map(|b| jac[(a, b)].abs()).sum();
            assert!(jac[(a, a)] > 0.0);
            assert!(jac[(a, a)] > off);
            assert!(jac.row(a).sum() > 0.0);
        }
    }

    #[test]
    fn logit_inversion_matches_berry_closed_form() {
        let (m, cfg) = setup(2, 2, 1);
        let rule = gauss_hermite_rule(1, 11).unwrap();
        let s = DVector::from_vec(vec![0.3, 0.2]);
        let inv = invert_shares(&m, &s, &Theta::zeros(2), &rule, &InversionOptions::default(), &cfg).unwrap();
        assert_relative_eq!(inv.delta[0], (0.3f64 / 0.5).ln(), epsilon = 1e-12);
        assert_relative_eq!(inv.delta[1], -0.9162907, epsilon = 1e-7);
        assert_relative_eq!(inv.delta[0], -0.5108256, epsilon = 1e-7);
    }

    #[test]
    fn inversion_round_trip() {
        let (m, cfg) = setup(6, 6, 2);
        let theta = theta_with_gamma(6, 0.8);
        let rule = gauss_hermite_rule(2, 9).unwrap();
        let delta_star = DVector::from_vec(vec![-1.0, 0.2, -0.5, 0.7, -2.0, 0.0]);
        let s = mixed_share(&m, &theta, &delta_star, &rule, &cfg).unwrap();
        let inv = invert_shares(&m, &s, &theta, &rule, &InversionOptions::default(), &cfg).unwrap();
        assert!((inv.delta - delta_star).amax() < 1e-9);
        assert!(inv.residual <= 1e-13);
    }

    #[test]
    fn contraction_residuals_never_increase() {
        let (m, cfg) = setup(5, 4, 1);
        let theta = theta_with_gamma(4, 1.5);
        let rule = gauss_hermite_rule(1, 11).unwrap();
        let s = mixed_share(&m, &theta, &DVector::from_vec(vec![0.4, -0.2, 0.9, -1.0, 0.1]), &rule, &cfg).unwrap();
        let inv = invert_shares(&m, &s, &theta, &rule, &InversionOptions::default(), &cfg).unwrap();
        assert!(!inv.contraction_residuals.is_empty());
        for w in inv.contraction_residuals.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", w);
        }
    }

    #[test]
    fn near_boundary_shares_never_produce_nan() {
        let (m, cfg) = setup(3, 2, 1);
        let theta = theta_with_gamma(2, 1.0);
        let rule = gauss_hermite_rule(1, 11).unwrap();
        let s = DVector::from_vec(vec![0.5, 0.3, 0.2 - 1e-6]);
        match invert_shares(&m, &s, &theta, &rule, &InversionOptions::default(), &cfg) {
            Ok(inv) => {
                assert!(inv.delta.iter().all(|v| v.is_finite()));
                let back = mixed_share(&m, &theta, &inv.delta, &rule, &cfg).unwrap();
                assert!((back.map(f64::ln) - s.map(f64::ln)).amax() < 1e-12);
            }
            Err(BlpError::Inversion { residual, .. }) => assert!(!residual.is_nan()),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn band_diagnostic_counts_products_outside() {
        let (m, cfg) = setup(2, 1, 1);
        let rule = gauss_hermite_rule(1, 3).unwrap();
        let opts = InversionOptions {
            share_floor_c1: 0.5,
            share_cap_c2: 0.5,
            ..Default::default()
        };
        let inv = invert_shares(&m, &DVector::from_vec(vec![0.3, 0.2]), &Theta::zeros(1), &rule, &opts, &cfg).unwrap();
        // band is [0.25, 0.25]: both products fall outside
        assert_eq!(inv.band_violations, 2);
    }

    #[test]
    fn invalid_observed_shares_are_rejected() {
        let (m, cfg) = setup(2, 1, 1);
        let rule = gauss_hermite_rule(1, 3).unwrap();
        let err = invert_shares(&m, &DVector::from_vec(vec![0.6, 0.5]), &Theta::zeros(1), &rule, &InversionOptions::default(), &cfg);
        assert!(matches!(err, Err(BlpError::Data(_))));
    }
}
