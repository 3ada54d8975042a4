//! `sparse-blp` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical failure.

mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use sparse_blp::debias::{debias, DebiasOptions, DebiasResult, MuRelaxation, PenaltyRule};
use sparse_blp::dgp::{simulate, DgpConfig};
use sparse_blp::io::{read_dataset_csv, write_dataset_csv, write_matrix_csv, write_vector_csv};
use sparse_blp::model::{validate_dataset, Dataset, ModelConfig};
use sparse_blp::moments::evaluate;
use sparse_blp::montecarlo::{run_study, write_report, McConfig};
use sparse_blp::rgmm::{auto_lambda, estimate, EstimationResult, RgmmOptions};
use sparse_blp::{BlpError, QuadratureRule, QuadratureSpec, Theta};

use manifest::{RunManifest, DIGEST};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "sparse-blp", version, about = "Sparse random-coefficients logit estimation and inference")]
struct Cli {
    /// Worker threads for market-level and replication-level parallelism.
    #[arg(long, global = true, env = "SPARSE_BLP_THREADS")]
    threads: Option<usize>,
    /// Master seed; overrides the seed in any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output on standard error.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset from a DGP config.
    Simulate(SimulateArgs),
    /// Fit the sparse estimator to a dataset.
    Estimate(EstimateArgs),
    /// De-bias an estimate and build confidence intervals.
    Debias(DebiasArgs),
    /// Run a replication study.
    Mc(McArgs),
    /// Write the moment vector, Jacobian and weight matrix at an estimate.
    ExportMoments(ExportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum QuadKind {
    Gh,
    Mc,
}

#[derive(Args, Debug, Default)]
struct QuadArgs {
    #[arg(long = "quad")]
    kind: Option<QuadKind>,
    #[arg(long = "quad-nodes")]
    nodes: Option<usize>,
    #[arg(long = "quad-draws")]
    draws: Option<usize>,
    #[arg(long = "quad-seed")]
    quad_seed: Option<u64>,
}

impl QuadArgs {
    fn resolve(&self, base: &QuadratureSpec) -> Result<QuadratureSpec, Failure> {
        let kind = match (self.kind, base) {
            (Some(k), _) => k,
            (None, QuadratureSpec::Gh { .. }) => QuadKind::Gh,
            (None, QuadratureSpec::Mc { .. }) => QuadKind::Mc,
            (None, QuadratureSpec::Default) => {
                if self.nodes.is_some() {
                    QuadKind::Gh
                } else if self.draws.is_some() || self.quad_seed.is_some() {
                    QuadKind::Mc
                } else {
                    return Ok(QuadratureSpec::Default);
                }
            }
        };
        Ok(match kind {
            QuadKind::Gh => {
                if self.draws.is_some() || self.quad_seed.is_some() {
                    return Err(Failure::Usage("--quad-draws and --quad-seed apply to --quad mc".into()));
                }
                let base_nodes = if let QuadratureSpec::Gh { nodes } = base { *nodes } else { 11 };
                QuadratureSpec::Gh {
                    nodes: self.nodes.unwrap_or(base_nodes),
                }
            }
            QuadKind::Mc => {
                if self.nodes.is_some() {
                    return Err(Failure::Usage("--quad-nodes applies to --quad gh".into()));
                }
                let (d, s) = if let QuadratureSpec::Mc { draws, seed } = base { (*draws, *seed) } else { (5000, 0) };
                QuadratureSpec::Mc {
                    draws: self.draws.unwrap_or(d),
                    seed: self.quad_seed.unwrap_or(s),
                }
            }
        })
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    dgp: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the true parameter and model layout.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    quad: QuadArgs,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Estimation config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `auto` for the plug-in rule, or a nonnegative number.
    #[arg(long, default_value = "auto")]
    lambda: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    quad: QuadArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PenaltyKind {
    Rate,
    Scaled,
    Fixed,
}

#[derive(Args, Debug)]
struct DebiasArgs {
    /// Result file written by `estimate`.
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "rate")]
    penalty: PenaltyKind,
    #[arg(long, default_value_t = 0.0)]
    bar_a: f64,
    #[arg(long, default_value_t = 1.5)]
    c_prime: f64,
    #[arg(long, default_value_t = 0.5)]
    c_gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    c_mu: f64,
    #[arg(long)]
    lambda_gamma: Option<f64>,
    #[arg(long)]
    lambda_mu: Option<f64>,
    /// Loosen infeasible μ rows instead of failing.
    #[arg(long)]
    relax_mu: bool,
}

#[derive(Args, Debug)]
struct McArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    quad: QuadArgs,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    /// Result file written by `estimate`.
    #[arg(long)]
    estimate: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Estimation settings read from `--config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EstimateConfig {
    /// Number of random-coefficient groups.
    groups: usize,
    /// One-based group of each attribute; all in group 1 when absent.
    partition: Option<Vec<usize>>,
    quadrature: QuadratureSpec,
    rgmm: RgmmOptions,
    /// Level and multiplier of the plug-in `λ`.
    lambda_alpha: f64,
    lambda_c: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            groups: 1,
            partition: None,
            quadrature: QuadratureSpec::Default,
            rgmm: RgmmOptions::default(),
            lambda_alpha: 0.05,
            lambda_c: 1.0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EstimateOutput {
    config: EstimateConfig,
    lambda_rule: String,
    #[serde(flatten)]
    result: EstimationResult,
}

#[derive(Serialize)]
struct Coordinate {
    name: String,
    estimate: f64,
    debiased: f64,
    se: f64,
    ci_lower: f64,
    ci_upper: f64,
}

#[derive(Serialize)]
struct DebiasOutput<'a> {
    coordinates: Vec<Coordinate>,
    result: &'a DebiasResult,
}

#[derive(Serialize, Deserialize)]
struct Truth {
    model: ModelConfig,
    theta: Theta,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<BlpError> for Failure {
    fn from(e: BlpError) -> Self {
        if e.is_data_error() || matches!(e, BlpError::Io(_) | BlpError::RuleTooLarge { .. } | BlpError::LpTooLarge { .. }) {
            Self::Data(e.to_string())
        } else {
            Self::Numerical(e.to_string())
        }
    }
}

fn io_failure(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    check_input(path)?;
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_failure(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_failure(p, e)),
        _ => Ok(()),
    }
}

/// Refuses inputs whose bytes differ from what an earlier stage recorded.
fn check_input(path: &Path) -> Result<(), Failure> {
    if !path.exists() {
        return Err(io_failure(path, "no such file"));
    }
    match manifest::verify_input(path) {
        Ok(None) => Ok(()),
        Ok(Some(msg)) => Err(Failure::Data(msg)),
        Err(e) => Err(io_failure(path, e)),
    }
}

fn build_rule(spec: &QuadratureSpec, groups: usize) -> Result<QuadratureRule, Failure> {
    Ok(spec.build(groups)?)
}

fn load_dataset(path: &Path, groups: usize, partition: Option<&[usize]>) -> Result<Dataset, Failure> {
    check_input(path)?;
    let zero_based = match partition {
        Some(p) => {
            if p.contains(&0) {
                return Err(Failure::Data("partition entries are one-based group labels".into()));
            }
            Some(p.iter().map(|g| g - 1).collect::<Vec<_>>())
        }
        None => None,
    };
    let data = read_dataset_csv(path, groups, zero_based.as_deref())?;
    let violations = validate_dataset(&data);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("{}: {v}", path.display());
        }
        return Err(Failure::Data(format!("{} violations in {}", violations.len(), path.display())));
    }
    Ok(data)
}

struct Context {
    seed: Option<u64>,
    threads: Option<usize>,
    started: String,
}

impl Context {
    fn manifest(&self, subcommand: &str, configs: &[&Path], options: serde_json::Value) -> RunManifest {
        RunManifest {
            subcommand: subcommand.into(),
            tool_version: VERSION.into(),
            seed: self.seed,
            threads: self.threads,
            config_paths: configs.iter().map(|p| manifest::canonical(p).display().to_string()).collect(),
            resolved_options: options,
            started: self.started.clone(),
            finished: now(),
            digest: DIGEST.into(),
            inputs: Default::default(),
            outputs: Default::default(),
        }
    }

    fn record(&self, run: RunManifest, inputs: &[&Path], outputs: &[&Path]) -> Result<(), Failure> {
        let written = manifest::record(run, inputs, outputs).map_err(|e| Failure::Data(format!("manifest: {e}")))?;
        for p in written {
            log::info!("manifest {}", p.display());
        }
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn cmd_simulate(ctx: &Context, a: &SimulateArgs) -> Result<(), Failure> {
    let mut dgp: DgpConfig = read_json(&a.dgp)?;
    if let Some(seed) = ctx.seed {
        dgp.seed = seed;
    }
    let spec = a.quad.resolve(&QuadratureSpec::Default)?;
    let rule = build_rule(&spec, dgp.model.groups())?;
    let (data, theta) = simulate(&dgp, &rule)?;
    ensure_parent(&a.out)?;
    write_dataset_csv(&data, &a.out)?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(t) = &a.truth {
        write_json(
            t,
            &Truth {
                model: dgp.model.clone(),
                theta,
            },
        )?;
        outputs.push(t.as_path());
    }
    let run = ctx.manifest(
        "simulate",
        &[&a.dgp],
        serde_json::json!({ "dgp": to_value(&dgp), "quadrature": to_value(&spec) }),
    );
    ctx.record(run, &[&a.dgp], &outputs)
}

fn cmd_estimate(ctx: &Context, a: &EstimateArgs) -> Result<(), Failure> {
    let mut cfg: EstimateConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EstimateConfig::default(),
    };
    cfg.quadrature = a.quad.resolve(&cfg.quadrature)?;
    let data = load_dataset(&a.data, cfg.groups, cfg.partition.as_deref())?;
    let rule = build_rule(&cfg.quadrature, cfg.groups)?;
    let lambda_rule = if a.lambda == "auto" {
        cfg.rgmm.lambda = auto_lambda(&data, &rule, &cfg.rgmm.inversion, cfg.lambda_alpha, cfg.lambda_c)?;
        format!("auto (alpha {}, c {})", cfg.lambda_alpha, cfg.lambda_c)
    } else {
        let v: f64 = a
            .lambda
            .parse()
            .map_err(|_| Failure::Usage(format!("--lambda must be `auto` or a number, got {:?}", a.lambda)))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Failure::Usage(format!("--lambda must be nonnegative, got {v}")));
        }
        cfg.rgmm.lambda = v;
        "fixed".into()
    };
    log::info!("lambda {:.6e} ({lambda_rule})", cfg.rgmm.lambda);
    let result = estimate(&data, &rule, &cfg.rgmm)?;
    let converged = result.converged;
    let iters = result.outer_iters;
    let out = EstimateOutput {
        config: cfg,
        lambda_rule,
        result,
    };
    write_json(&a.out, &out)?;
    let mut inputs = vec![a.data.as_path()];
    let mut configs = Vec::new();
    if let Some(p) = &a.config {
        inputs.push(p);
        configs.push(p.as_path());
    }
    let run = ctx.manifest("estimate", &configs, serde_json::json!({ "config": to_value(&out.config), "lambda": out.result.lambda }));
    ctx.record(run, &inputs, &[&a.out])?;
    if !converged {
        return Err(Failure::Numerical(format!(
            "estimator stopped without converging after {iters} outer iterations; result written to {}",
            a.out.display()
        )));
    }
    Ok(())
}

fn penalty_rule(a: &DebiasArgs) -> Result<PenaltyRule, Failure> {
    let rule = match a.penalty {
        PenaltyKind::Rate => PenaltyRule::Rate {
            bar_a: a.bar_a,
            c_prime: a.c_prime,
        },
        PenaltyKind::Scaled => PenaltyRule::Scaled {
            c_gamma: a.c_gamma,
            c_mu: a.c_mu,
        },
        PenaltyKind::Fixed => match (a.lambda_gamma, a.lambda_mu) {
            (Some(lambda_gamma), Some(lambda_mu)) => PenaltyRule::Fixed { lambda_gamma, lambda_mu },
            _ => return Err(Failure::Usage("--penalty fixed needs --lambda-gamma and --lambda-mu".into())),
        },
    };
    rule.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(rule)
}

fn coordinate_name(i: usize, l: usize) -> String {
    if i < l {
        format!("beta_{}", i + 1)
    } else {
        format!("gamma_{}", i - l + 1)
    }
}

fn cmd_debias(ctx: &Context, a: &DebiasArgs) -> Result<(), Failure> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Failure::Usage(format!("--alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let penalties = penalty_rule(a)?;
    let est: EstimateOutput = read_json(&a.estimate)?;
    let data = load_dataset(&a.data, est.config.groups, est.config.partition.as_deref())?;
    let rule = build_rule(&est.config.quadrature, est.config.groups)?;
    let opts = DebiasOptions {
        penalties,
        alpha: a.alpha,
        mu_relaxation: a.relax_mu.then(MuRelaxation::default),
        inversion: est.config.rgmm.inversion.clone(),
    };
    let res = debias(&data, &rule, &est.result.theta_hat, &opts)?;
    let l = data.config.attributes();
    let coordinates = (0..2 * l)
        .map(|i| Coordinate {
            name: coordinate_name(i, l),
            estimate: res.theta_hat[i],
            debiased: res.theta_dd[i],
            se: res.se[i],
            ci_lower: res.ci[i].0,
            ci_upper: res.ci[i].1,
        })
        .collect();
    write_json(&a.out, &DebiasOutput { coordinates, result: &res })?;
    let run = ctx.manifest("debias", &[], serde_json::json!({ "options": to_value(&opts) }));
    ctx.record(run, &[&a.estimate, &a.data], &[&a.out])
}

fn cmd_mc(ctx: &Context, a: &McArgs) -> Result<(), Failure> {
    let mut cfg: McConfig = read_json(&a.config)?;
    if let Some(seed) = ctx.seed {
        cfg.dgp.seed = seed;
    }
    cfg.quadrature = a.quad.resolve(&cfg.quadrature)?;
    let report = run_study(&cfg)?;
    write_report(&report, &a.out)?;
    let names = ["summary.json", "records.csv", "error_by_n.csv", "coverage_by_coordinate.csv", "report.json"];
    let outputs: Vec<PathBuf> = names.iter().map(|n| a.out.join(n)).collect();
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let run = ctx.manifest("mc", &[&a.config], serde_json::json!({ "config": to_value(&cfg) }));
    ctx.record(run, &[&a.config], &refs)
}

fn cmd_export(ctx: &Context, a: &ExportArgs) -> Result<(), Failure> {
    let est: EstimateOutput = read_json(&a.estimate)?;
    let data = load_dataset(&a.data, est.config.groups, est.config.partition.as_deref())?;
    let rule = build_rule(&est.config.quadrature, est.config.groups)?;
    let eval = evaluate(&data, &est.result.theta_hat, &rule, &est.config.rgmm.inversion, true)?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let f = a.out.join("f_hat.csv");
    let g = a.out.join("G_hat.csv");
    let o = a.out.join("Omega_hat.csv");
    write_vector_csv(&eval.score, &f)?;
    let jac = eval
        .jacobian
        .clone()
        .ok_or_else(|| Failure::Numerical("Jacobian was not computed".into()))?;
    write_matrix_csv(&jac, &g)?;
    write_matrix_csv(&eval.omega(), &o)?;
    let run = ctx.manifest("export-moments", &[], serde_json::json!({ "theta": to_value(&est.result.theta_hat) }));
    ctx.record(run, &[&a.estimate, &a.data], &[&f, &g, &o])
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    let ctx = Context {
        seed: cli.seed,
        threads: cli.threads,
        started: now(),
    };
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::Estimate(a) => cmd_estimate(&ctx, a),
        Command::Debias(a) => cmd_debias(&ctx, a),
        Command::Mc(a) => cmd_mc(&ctx, a),
        Command::ExportMoments(a) => cmd_export(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sparse-blp: {f}");
            ExitCode::from(f.code())
        }
    }
}
