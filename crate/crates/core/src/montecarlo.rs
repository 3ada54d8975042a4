//! Replication studies: simulate, estimate, de-bias, score against the truth.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debias::{debias, DebiasOptions, MuRelaxation, PenaltyRule};
use crate::dgp::{simulate, DgpConfig};
use crate::error::{BlpError, Result};
use crate::model::{ModelConfig, Theta};
use crate::moments::evaluate;
use crate::quadrature::QuadratureSpec;
use crate::rgmm::{auto_lambda, estimate, RgmmOptions};
use crate::stats::median;

pub const DEFAULT_SUPPORT_TOL: f64 = 1e-6;

/// How each replication picks the RGMM `λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaRule {
    /// [`auto_lambda`] with the given multiplier and level.
    Plugin { c_mult: f64, alpha: f64 },
    Fixed { value: f64 },
}

impl Default for LambdaRule {
    fn default() -> Self {
        Self::Plugin {
            c_mult: 1.0,
            alpha: 0.05,
        }
    }
}

fn default_alpha() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

fn default_support_tol() -> f64 {
    DEFAULT_SUPPORT_TOL
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// Design; `dgp.seed` is the master seed and the market count is taken from `n_grid`.
    pub dgp: DgpConfig,
    pub replications: usize,
    pub n_grid: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub penalties: PenaltyRule,
    #[serde(default)]
    pub mu_relaxation: Option<MuRelaxation>,
    #[serde(default)]
    pub lambda: LambdaRule,
    #[serde(default)]
    pub rgmm: RgmmOptions,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    /// Skip the de-biasing stage when false.
    #[serde(default = "default_true")]
    pub debias: bool,
    #[serde(default = "default_support_tol")]
    pub support_tol: f64,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(BlpError::Config("replications must be at least 1".into()));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(BlpError::Config("n_grid must list positive market counts".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(BlpError::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.support_tol >= 0.0) {
            return Err(BlpError::Config("support_tol must be nonnegative".into()));
        }
        self.dgp.validate()?;
        self.penalties.validate()?;
        self.rgmm.validate()
    }
}

/// Seed of replication `rep`; shared across `n_grid`, so a larger panel extends a smaller one.
pub fn replication_seed(master: u64, rep: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = master.wrapping_add((rep as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(precision, recall)` of `{l : |θ̂_l| > tol}` against `{l : |θ_l| > tol}`.
///
/// An empty estimated support has precision 1 when the true support is empty too and
/// 0 otherwise; an empty true support has recall 1.
pub fn support_metrics(theta_hat: &[f64], theta_true: &[f64], tol: f64) -> (f64, f64) {
    assert_eq!(theta_hat.len(), theta_true.len(), "support_metrics needs equal lengths");
    let est: Vec<bool> = theta_hat.iter().map(|v| v.abs() > tol).collect();
    let tru: Vec<bool> = theta_true.iter().map(|v| v.abs() > tol).collect();
    let hits = est.iter().zip(&tru).filter(|(a, b)| **a && **b).count() as f64;
    let n_est = est.iter().filter(|v| **v).count() as f64;
    let n_true = tru.iter().filter(|v| **v).count() as f64;
    let precision = if n_est == 0.0 {
        if n_true == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        hits / n_est
    };
    let recall = if n_true == 0.0 { 1.0 } else { hits / n_true };
    (precision, recall)
}

/// Flips `γ̂` group by group so that it points the same way as `γ_true`.
///
/// The moments are even in each group's `γ_g`, so `γ_g` and `−γ_g` fit equally well.
pub fn align_signs(theta_hat: &Theta, theta_true: &Theta, config: &ModelConfig) -> Theta {
    let mut out = theta_hat.clone();
    for g in 0..config.groups() {
        let members = (0..config.attributes()).filter(|&l| config.group_of(l) == g);
        let dot: f64 = members.clone().map(|l| theta_hat.gamma[l] * theta_true.gamma[l]).sum();
        if dot < 0.0 {
            for l in members {
                out.gamma[l] = -out.gamma[l];
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub simulate_s: f64,
    pub estimate_s: f64,
    pub debias_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    /// `None` when the replication completed; otherwise the stage and error.
    pub failure: Option<String>,
    pub lambda: Option<f64>,
    pub converged: Option<bool>,
    pub outer_iters: Option<usize>,
    pub l1_error: Option<f64>,
    pub l2_error: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub debiased_l2_error: Option<f64>,
    /// Per-coordinate indicator that the interval covers the truth.
    pub covered: Option<Vec<bool>>,
    pub ci_width: Option<Vec<f64>>,
    /// `‖√n(θ̂̂ − θ) + μ̂γ̂√n f̂(θ)‖∞` at the truth `θ`.
    pub remainder: Option<f64>,
    pub relaxed_mu_rows: Option<usize>,
    pub unidentified_mu_rows: Option<usize>,
    pub timing: Timing,
}

impl McRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McAggregate {
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub median_l1_error: f64,
    pub median_l2_error: f64,
    pub median_debiased_l2_error: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    /// Share of (replication, true-support coordinate) pairs covered; failures count as misses.
    pub coverage_support: f64,
    /// The same over every coordinate.
    pub coverage_all: f64,
    /// Coverage of each coordinate, failures counted as misses.
    pub coverage_by_coordinate: Vec<f64>,
    pub median_ci_width_support: f64,
    pub median_remainder: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: McConfig,
    pub theta_true: Vec<f64>,
    pub records: Vec<McRecord>,
    pub aggregates: Vec<McAggregate>,
}

impl McReport {
    /// The report with all wall-clock fields zeroed, for byte-level comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.timing = Timing {
                simulate_s: 0.0,
                estimate_s: 0.0,
                debias_s: 0.0,
            };
        }
        out
    }

    pub fn aggregate(&self, n: usize) -> Option<&McAggregate> {
        self.aggregates.iter().find(|a| a.n == n)
    }
}

fn finite_median(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().filter(|x| x.is_finite()).collect();
    median(&v)
}

fn aggregate(n: usize, records: &[&McRecord], support: &[usize], p: usize) -> McAggregate {
    let reps = records.len();
    let mut by_coord = vec![0usize; p];
    for r in records {
        if let Some(c) = &r.covered {
            for (l, &hit) in c.iter().enumerate() {
                by_coord[l] += usize::from(hit);
            }
        }
    }
    let rate = |count: usize, denom: usize| if denom == 0 { f64::NAN } else { count as f64 / denom as f64 };
    let support_hits: usize = support.iter().map(|&l| by_coord[l]).sum();
    let mean = |f: &dyn Fn(&McRecord) -> Option<f64>| {
        let v: Vec<f64> = records.iter().filter_map(|r| f(r)).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    McAggregate {
        n,
        replications: reps,
        failures: records.iter().filter(|r| r.failed()).count(),
        median_l1_error: finite_median(records.iter().map(|r| r.l1_error)),
        median_l2_error: finite_median(records.iter().map(|r| r.l2_error)),
        median_debiased_l2_error: finite_median(records.iter().map(|r| r.debiased_l2_error)),
        mean_precision: mean(&|r| r.precision),
        mean_recall: mean(&|r| r.recall),
        coverage_support: rate(support_hits, reps * support.len()),
        coverage_all: rate(by_coord.iter().sum(), reps * p),
        coverage_by_coordinate: by_coord.iter().map(|&c| rate(c, reps)).collect(),
        median_ci_width_support: finite_median(
            records
                .iter()
                .filter_map(|r| r.ci_width.as_ref())
                .flat_map(|w| support.iter().map(move |&l| Some(w[l]))),
        ),
        median_remainder: finite_median(records.iter().map(|r| r.remainder)),
    }
}

fn run_replication(cfg: &McConfig, n: usize, rep: usize) -> McRecord {
    let seed = replication_seed(cfg.dgp.seed, rep);
    let mut record = McRecord {
        n,
        replication: rep,
        seed,
        failure: None,
        lambda: None,
        converged: None,
        outer_iters: None,
        l1_error: None,
        l2_error: None,
        precision: None,
        recall: None,
        debiased_l2_error: None,
        covered: None,
        ci_width: None,
        remainder: None,
        relaxed_mu_rows: None,
        unidentified_mu_rows: None,
        timing: Timing {
            simulate_s: 0.0,
            estimate_s: 0.0,
            debias_s: 0.0,
        },
    };
    if let Err((stage, e)) = fill_record(cfg, n, seed, &mut record) {
        record.failure = Some(format!("{stage}: {e}"));
    }
    record
}

fn fill_record(cfg: &McConfig, n: usize, seed: u64, record: &mut McRecord) -> std::result::Result<(), (&'static str, BlpError)> {
    let clock = Instant::now();
    let mut dgp = cfg.dgp.with_markets(n).map_err(|e| ("simulate", e))?;
    dgp.seed = seed;
    let rule = cfg.quadrature.build(dgp.model.groups()).map_err(|e| ("simulate", e))?;
    let (data, truth) = simulate(&dgp, &rule).map_err(|e| ("simulate", e))?;
    record.timing.simulate_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let mut opts = cfg.rgmm.clone();
    opts.lambda = match cfg.lambda {
        LambdaRule::Plugin { c_mult, alpha } => {
            auto_lambda(&data, &rule, &opts.inversion, alpha, c_mult).map_err(|e| ("lambda", e))?
        }
        LambdaRule::Fixed { value } => value,
    };
    record.lambda = Some(opts.lambda);
    let fit = estimate(&data, &rule, &opts).map_err(|e| ("estimate", e))?;
    record.timing.estimate_s = clock.elapsed().as_secs_f64();
    record.converged = Some(fit.converged);
    record.outer_iters = Some(fit.outer_iters);
    let theta_hat = align_signs(&fit.theta_hat, &truth, &dgp.model);
    let est = theta_hat.stacked();
    let tru = truth.stacked();
    record.l1_error = Some((&est - &tru).lp_norm(1));
    record.l2_error = Some((&est - &tru).norm());
    let (precision, recall) = support_metrics(est.as_slice(), tru.as_slice(), cfg.support_tol);
    record.precision = Some(precision);
    record.recall = Some(recall);
    if !cfg.debias {
        return Ok(());
    }

    let clock = Instant::now();
    let dopts = DebiasOptions {
        penalties: cfg.penalties.clone(),
        alpha: cfg.alpha,
        mu_relaxation: cfg.mu_relaxation.clone(),
        inversion: opts.inversion.clone(),
    };
    let out = debias(&data, &rule, &theta_hat, &dopts).map_err(|e| ("debias", e))?;
    let at_truth = evaluate(&data, &truth, &rule, &opts.inversion, false).map_err(|e| ("debias", e))?;
    record.timing.debias_s = clock.elapsed().as_secs_f64();
    let root_n = (n as f64).sqrt();
    let linear: DVector<f64> = &out.mu_hat * (&out.gamma_hat * &at_truth.score);
    record.remainder = Some(((&out.theta_dd - &tru + linear) * root_n).amax());
    record.debiased_l2_error = Some((&out.theta_dd - &tru).norm());
    record.covered = Some(out.ci.iter().zip(tru.iter()).map(|(&(lo, hi), &t)| lo <= t && t <= hi).collect());
    record.ci_width = Some(out.ci.iter().map(|(lo, hi)| hi - lo).collect());
    record.relaxed_mu_rows = Some(out.mu_rows.iter().filter(|r| r.requested_lambda.is_some()).count());
    record.unidentified_mu_rows = Some(out.mu_rows.iter().filter(|r| r.unidentified).count());
    Ok(())
}

/// Runs every `(n, replication)` pair in parallel and aggregates in `(n, replication)` order.
pub fn run_study(cfg: &McConfig) -> Result<McReport> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replications).map(move |r| (n, r)))
        .collect();
    let records: Vec<McRecord> = jobs.par_iter().map(|&(n, rep)| run_replication(cfg, n, rep)).collect();
    for r in records.iter().filter(|r| r.failed()) {
        log::warn!("n={} replication {}: {}", r.n, r.replication, r.failure.as_deref().unwrap_or(""));
    }
    if records.iter().all(McRecord::failed) {
        let first = records[0].failure.clone().unwrap_or_default();
        return Err(BlpError::StudyFailed(format!("{} of {} failed; first: {first}", records.len(), records.len())));
    }
    let truth = cfg.dgp.theta_true().stacked();
    let support: Vec<usize> = (0..truth.len()).filter(|&l| truth[l].abs() > cfg.support_tol).collect();
    let aggregates = cfg
        .n_grid
        .iter()
        .map(|&n| {
            let rows: Vec<&McRecord> = records.iter().filter(|r| r.n == n).collect();
            aggregate(n, &rows, &support, truth.len())
        })
        .collect();
    Ok(McReport {
        config: cfg.clone(),
        theta_true: truth.as_slice().to_vec(),
        records,
        aggregates,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.10e}")).unwrap_or_default()
}

/// Writes `summary.json`, `records.csv`, `error_by_n.csv` and `coverage_by_coordinate.csv`.
pub fn write_report(report: &McReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a McConfig,
        theta_true: &'a [f64],
        aggregates: &'a [McAggregate],
    }
    let summary = Summary {
        config: &report.config,
        theta_true: &report.theta_true,
        aggregates: &report.aggregates,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string(report)?)?;

    let mut w = csv::Writer::from_path(dir.join("records.csv"))?;
    w.write_record([
        "n",
        "replication",
        "seed",
        "failure",
        "lambda",
        "converged",
        "outer_iters",
        "l1_error",
        "l2_error",
        "precision",
        "recall",
        "debiased_l2_error",
        "support_covered",
        "remainder",
        "relaxed_mu_rows",
        "unidentified_mu_rows",
        "simulate_s",
        "estimate_s",
        "debias_s",
    ])?;
    let support: Vec<usize> = (0..report.theta_true.len())
        .filter(|&l| report.theta_true[l].abs() > report.config.support_tol)
        .collect();
    for r in &report.records {
        let covered = r
            .covered
            .as_ref()
            .map(|c| support.iter().filter(|&&l| c[l]).count().to_string())
            .unwrap_or_default();
        w.write_record([
            r.n.to_string(),
            r.replication.to_string(),
            r.seed.to_string(),
            r.failure.clone().unwrap_or_default(),
            opt(r.lambda),
            r.converged.map(|c| c.to_string()).unwrap_or_default(),
            r.outer_iters.map(|c| c.to_string()).unwrap_or_default(),
            opt(r.l1_error),
            opt(r.l2_error),
            opt(r.precision),
            opt(r.recall),
            opt(r.debiased_l2_error),
            covered,
            opt(r.remainder),
            r.relaxed_mu_rows.map(|c| c.to_string()).unwrap_or_default(),
            r.unidentified_mu_rows.map(|c| c.to_string()).unwrap_or_default(),
            format!("{:.3}", r.timing.simulate_s),
            format!("{:.3}", r.timing.estimate_s),
            format!("{:.3}", r.timing.debias_s),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("error_by_n.csv"))?;
    w.write_record([
        "n",
        "replications",
        "failures",
        "median_l1_error",
        "median_l2_error",
        "median_debiased_l2_error",
        "coverage_support",
        "median_ci_width_support",
        "median_remainder",
    ])?;
    for a in &report.aggregates {
        w.write_record([
            a.n.to_string(),
            a.replications.to_string(),
            a.failures.to_string(),
            a.median_l1_error.to_string(),
            a.median_l2_error.to_string(),
            a.median_debiased_l2_error.to_string(),
            a.coverage_support.to_string(),
            a.median_ci_width_support.to_string(),
            a.median_remainder.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("coverage_by_coordinate.csv"))?;
    w.write_record(["n", "coordinate", "theta_true", "coverage"])?;
    for a in &report.aggregates {
        for (l, c) in a.coverage_by_coordinate.iter().enumerate() {
            w.write_record([a.n.to_string(), l.to_string(), report.theta_true[l].to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
