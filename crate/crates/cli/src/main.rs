use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sharedrep::complexity::{
    f_inverse_half_delta, gap_profile, kl_gibbs_bound_check, n_maxmin, n_sr, psi_u, write_gap_curve, write_kl_curve, ComplexityInputs,
    GapProfile, KlBoundCheck, Regime,
};
use sharedrep::data::{compute_covariances, sample_dataset, PreferenceDataset, SamplingOptions};
use sharedrep::estimation::{fit_maxmin, fit_sharedrep, ConfidenceSpec, FitOptions, FitReport, ParamsDocument};
use sharedrep::harness::{emit, sweep, ScenarioConfig};
use sharedrep::io::{read_json, write_json};
use sharedrep::policy::{gibbs_policy, solve_maxmin_policy, MaxMinProblem, RewardTable, SolverOptions, UncertaintyPenalty};
use sharedrep::world::{build_world, World, WorldConfig};

#[derive(Parser)]
#[command(name = "sharedrep", version, about = "Tabular experiments for group-robust reward learning with shared representations")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, or output directory for `sweep run`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Projected-gradient stopping tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    #[arg(long, global = true)]
    restarts: Option<usize>,
    /// First trial step of the line search.
    #[arg(long, global = true)]
    lr0: Option<f64>,
    /// Common value of the constants hidden in the sample-size orders.
    #[arg(long, global = true)]
    constant_multiplier: Option<f64>,
    /// Force the entropy-gap regime instead of choosing it from the gap.
    #[arg(long, global = true, value_enum)]
    regime_override: Option<RegimeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    LargeGap,
    SmallGap,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::LargeGap => Regime::LargeGap,
            RegimeArg::SmallGap => Regime::SmallGap,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic worlds.
    World {
        #[command(subcommand)]
        action: WorldAction,
    },
    /// Preference datasets.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Fit reward parameters to a dataset.
    Fit(FitArgs),
    /// Max-min policies.
    Policy {
        #[command(subcommand)]
        action: PolicyAction,
    },
    /// Sample-size and divergence diagnostics.
    Complexity {
        #[command(subcommand)]
        action: ComplexityAction,
    },
    /// Scenario sweeps.
    Sweep {
        #[command(subcommand)]
        action: SweepAction,
    },
}

#[derive(Subcommand)]
enum WorldAction {
    /// Build a world from a `WorldConfig` (defaults when no config is given).
    Gen,
}

#[derive(Subcommand)]
enum DataAction {
    /// Draw labelled comparisons from a world's true rewards.
    Sample(SampleArgs),
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    world: PathBuf,
    /// Number of comparisons.
    #[arg(long)]
    n: usize,
    /// Group proportions; defaults to the world's configured proportions.
    #[arg(long, value_delimiter = ',')]
    proportions: Option<Vec<f64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMethod {
    Sharedrep,
    Maxmin,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "sharedrep")]
    method: FitMethod,
    /// Shared dimension; defaults to the world's.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum PolicyAction {
    /// Solve the max-min KL-regularized policy for fitted or true rewards.
    Solve(SolveArgs),
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    world: PathBuf,
    /// Fitted parameters; the world's true rewards are used when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Dataset whose covariance defines the pessimism penalty.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Width constant of the shared confidence radius; 0 disables pessimism.
    #[arg(long, default_value_t = 1.0)]
    c_sr: f64,
}

#[derive(Subcommand)]
enum ComplexityAction {
    /// Entropy gaps and sample-size formulas for a world and dataset.
    Eval(ComplexityArgs),
}

#[derive(Args)]
struct ComplexityArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Target suboptimality for the shared-representation sample size.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Dataset sizes for the divergence curve; skipped when empty.
    #[arg(long, value_delimiter = ',')]
    kl_n_grid: Vec<usize>,
}

#[derive(Subcommand)]
enum SweepAction {
    /// Run every trial of a `ScenarioConfig` and write the result set.
    Run,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::warn!("at least one run did not converge");
            ExitCode::from(1)
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether every solver involved converged.
fn run(cli: Cli) -> Result<bool> {
    let g = cli.global;
    match cli.command {
        Command::World { action: WorldAction::Gen } => world_gen(&g),
        Command::Data {
            action: DataAction::Sample(a),
        } => data_sample(&g, &a),
        Command::Fit(a) => fit(&g, &a),
        Command::Policy {
            action: PolicyAction::Solve(a),
        } => policy_solve(&g, &a),
        Command::Complexity {
            action: ComplexityAction::Eval(a),
        } => complexity_eval(&g, &a),
        Command::Sweep { action: SweepAction::Run } => sweep_run(&g),
    }
}

fn require_out(g: &Global) -> Result<&Path> {
    g.out.as_deref().context("--out is required")
}

fn load_config<T: serde::de::DeserializeOwned + Default>(g: &Global) -> Result<T> {
    match &g.config {
        Some(path) => read_json(path).with_context(|| format!("reading {}", path.display())),
        None => Ok(T::default()),
    }
}

fn load_world(path: &Path) -> Result<World> {
    World::load(path).with_context(|| format!("loading world {}", path.display()))
}

fn load_data(path: &Path, world: &World) -> Result<PreferenceDataset> {
    PreferenceDataset::read_csv(path, &world.features, world.num_groups()).with_context(|| format!("loading dataset {}", path.display()))
}

fn fit_options(g: &Global, mut opts: FitOptions) -> FitOptions {
    if let Some(v) = g.tol {
        opts.tol = v;
    }
    if let Some(v) = g.max_iters {
        opts.max_iters = v;
    }
    if let Some(v) = g.restarts {
        opts.restarts = v;
    }
    if let Some(v) = g.lr0 {
        opts.lr0 = v;
    }
    if let Some(v) = g.seed {
        opts.seed = v;
    }
    opts
}

fn world_gen(g: &Global) -> Result<bool> {
    let mut config: WorldConfig = load_config(g)?;
    if let Some(seed) = g.seed {
        config.rng_seed = seed;
    }
    let world = build_world(&config)?;
    world.save(require_out(g)?)?;
    Ok(true)
}

fn data_sample(g: &Global, a: &SampleArgs) -> Result<bool> {
    let world = load_world(&a.world)?;
    let opts: SamplingOptions = load_config(g)?;
    let proportions = a.proportions.clone().unwrap_or_else(|| world.config.group_proportions.clone());
    let ds = sample_dataset(&world, a.n, &proportions, &opts, g.seed.unwrap_or(0))?;
    ds.write_csv(require_out(g)?)?;
    Ok(true)
}

fn fit(g: &Global, a: &FitArgs) -> Result<bool> {
    let world = load_world(&a.world)?;
    let ds = load_data(&a.data, &world)?;
    let opts = fit_options(g, load_config(g)?);
    let b_max = world.config.b_max;
    let (doc, report): (ParamsDocument, FitReport) = match a.method {
        FitMethod::Sharedrep => {
            let (p, r) = fit_sharedrep(&ds, a.k.unwrap_or(world.config.shared_dim), b_max, &opts)?;
            (ParamsDocument::from_sharedrep(&p, &r), r)
        }
        FitMethod::Maxmin => {
            let (p, r) = fit_maxmin(&ds, b_max, &opts)?;
            (ParamsDocument::from_maxmin(&p, &r), r)
        }
    };
    log::info!(
        "loss {:.6} after {} iterations, gradient norm {:.3e}",
        report.final_loss,
        report.iterations,
        report.grad_norm
    );
    doc.save(require_out(g)?)?;
    Ok(report.converged)
}

fn reward_tables(world: &World, params: Option<&Path>) -> Result<Vec<RewardTable>> {
    let Some(path) = params else {
        return Ok(world.reward_tables());
    };
    let doc = ParamsDocument::load(path).with_context(|| format!("loading parameters {}", path.display()))?;
    let theta = doc.theta_matrix()?;
    if theta.nrows() != world.features.dim() || theta.ncols() != world.num_groups() {
        bail!("parameters are {}×{}, the world needs {}×{}", theta.nrows(), theta.ncols(), world.features.dim(), world.num_groups());
    }
    Ok(theta
        .column_iter()
        .map(|c| RewardTable::linear(&world.features, c.as_slice()))
        .collect())
}

#[derive(Serialize)]
struct PolicyReport {
    converged: bool,
    duality_gap: f64,
    eta: f64,
    group_objectives: Vec<f64>,
    group_weights: Vec<f64>,
    policy: Vec<Vec<f64>>,
}

fn policy_solve(g: &Global, a: &SolveArgs) -> Result<bool> {
    let world = load_world(&a.world)?;
    let rewards = reward_tables(&world, a.params.as_deref())?;
    let opts: SolverOptions = load_config(g)?;
    let (metric, eta) = match &a.data {
        Some(path) if a.c_sr > 0.0 => {
            let ds = load_data(path, &world)?;
            let lambda = 1.0 / ds.len() as f64;
            let metric = compute_covariances(&ds, lambda).pooled_metric()?;
            let spec = ConfidenceSpec::with_constants(world.features.dim(), lambda, a.delta, world.config.b_max, world.config.l_max, a.c_sr, 1.0)?;
            (Some(metric), spec.eta_sr(ds.len())?)
        }
        _ => (None, 0.0),
    };
    let penalty = metric.as_ref().map(|m| UncertaintyPenalty {
        eta,
        features: &world.features,
        metric: m,
    });
    let solution = solve_maxmin_policy(
        MaxMinProblem {
            rewards: &rewards,
            reference: &world.truth.ref_policy,
            rho: &world.prompts,
            beta: a.beta,
            penalty,
        },
        &opts,
    )?;
    log::info!("certified duality gap {:.3e}", solution.duality_gap);
    write_json(
        require_out(g)?,
        &PolicyReport {
            converged: solution.converged,
            duality_gap: solution.duality_gap,
            eta,
            group_objectives: solution.group_objectives.clone(),
            group_weights: solution.group_weights.clone(),
            policy: solution.policy.to_rows(),
        },
    )?;
    Ok(solution.converged)
}

#[derive(Serialize)]
struct ComplexityReport {
    n: usize,
    lambda: f64,
    spec: ConfidenceSpec,
    gap: GapProfile,
    regime: Regime,
    psi_u: Vec<f64>,
    f_inverse_half_delta: f64,
    n_maxmin: f64,
    epsilon: f64,
    n_sr: f64,
    epsilon_term: f64,
    kl_curve: Vec<(usize, KlBoundCheck)>,
}

fn complexity_eval(g: &Global, a: &ComplexityArgs) -> Result<bool> {
    let world = load_world(&a.world)?;
    let ds = load_data(&a.data, &world)?;
    let out = require_out(g)?;
    let n = ds.len();
    let lambda = 1.0 / n as f64;
    let (d, b_max, l_max) = (world.features.dim(), world.config.b_max, world.config.l_max);
    let spec = ConfidenceSpec::new(d, lambda, a.delta, b_max, l_max)?;
    let metric = compute_covariances(&ds, lambda).pooled_metric()?;
    let gibbs = world
        .reward_tables()
        .iter()
        .map(|r| gibbs_policy(r, &world.truth.ref_policy, a.beta))
        .collect::<sharedrep::Result<Vec<_>>>()?;
    let gap = gap_profile(&gibbs, &world.prompts)?;
    let psi = (0..world.num_groups())
        .map(|u| psi_u(&world, &metric, &spec, a.beta, u))
        .collect::<sharedrep::Result<Vec<_>>>()?;
    let y_size = world.features.num_responses();
    let inputs = ComplexityInputs::new(y_size, a.beta, spec.clone(), psi.clone(), &gap, g.regime_override.map(Regime::from))
        .with_multiplier(g.constant_multiplier.unwrap_or(1.0));

    let truth = world.reward_tables();
    let maxmin = solve_maxmin_policy(
        MaxMinProblem {
            rewards: &truth,
            reference: &world.truth.ref_policy,
            rho: &world.prompts,
            beta: a.beta,
            penalty: None,
        },
        &SolverOptions::default(),
    )?;
    let pistar_norm = metric.inv_norm(&world.features.expected(&maxmin.policy, &world.prompts));
    let sizes = n_sr(&inputs, &gap, pistar_norm, a.epsilon)?;

    let (kl_curve, fits_converged) = kl_curve(g, a, &world)?;
    let report = ComplexityReport {
        n,
        lambda,
        spec,
        gap: gap.clone(),
        regime: inputs.regime,
        psi_u: psi,
        f_inverse_half_delta: f_inverse_half_delta(gap.delta_min, y_size)?,
        n_maxmin: n_maxmin(&inputs, &gap)?,
        epsilon: a.epsilon,
        n_sr: sizes.n_sr,
        epsilon_term: sizes.epsilon_term,
        kl_curve: kl_curve.clone(),
    };
    write_json(out, &report)?;

    let stem = out.with_extension("");
    let gap_rows = delta_grid(gap.delta_min)
        .into_iter()
        .map(|delta| {
            let scaled = GapProfile {
                delta_min: delta,
                ..gap.clone()
            };
            Ok((delta, n_maxmin(&inputs, &scaled)?))
        })
        .collect::<sharedrep::Result<Vec<_>>>()?;
    write_gap_curve(&PathBuf::from(format!("{}_gap_curve.csv", stem.display())), &gap_rows)?;
    if !kl_curve.is_empty() {
        write_kl_curve(&PathBuf::from(format!("{}_kl_curve.csv", stem.display())), &kl_curve)?;
    }
    Ok(maxmin.converged && fits_converged)
}

/// Forty log-spaced gap values from `Δ_min/100` to `100 Δ_min`.
fn delta_grid(delta_min: f64) -> Vec<f64> {
    let (lo, hi) = ((delta_min / 100.0).ln(), (delta_min * 100.0).ln());
    (0..40).map(|i| (lo + (hi - lo) * i as f64 / 39.0).exp()).collect()
}

/// Measured divergence of the fitted minority Gibbs policy against its bound
/// for every size in `--kl-n-grid`, on fresh datasets from the world.
fn kl_curve(g: &Global, a: &ComplexityArgs, world: &World) -> Result<(Vec<(usize, KlBoundCheck)>, bool)> {
    let opts = fit_options(g, FitOptions::default());
    let group = world.num_groups() - 1;
    let mut rows = Vec::with_capacity(a.kl_n_grid.len());
    let mut converged = true;
    for &n in &a.kl_n_grid {
        let ds = sample_dataset(world, n, &world.config.group_proportions, &SamplingOptions::default(), opts.seed)?;
        let lambda = 1.0 / n as f64;
        let spec = ConfidenceSpec::new(world.features.dim(), lambda, a.delta, world.config.b_max, world.config.l_max)?;
        let metric = compute_covariances(&ds, lambda).pooled_metric()?;
        let (params, report) = fit_sharedrep(&ds, world.config.shared_dim, world.config.b_max, &opts)?;
        converged &= report.converged;
        rows.push((n, kl_gibbs_bound_check(world, &params.theta_of(group), &metric, &spec, n, a.beta, group)?));
    }
    Ok((rows, converged))
}

fn sweep_run(g: &Global) -> Result<bool> {
    let mut scenario: ScenarioConfig = load_config(g)?;
    scenario.fit = fit_options(g, scenario.fit);
    if let Some(seed) = g.seed {
        scenario.world.rng_seed = seed;
    }
    let out = require_out(g)?;
    let outcome = sweep(&scenario, g.jobs)?;
    let manifest = emit(&outcome, out)?;
    log::info!(
        "{} of {} trials completed, results in {}",
        outcome.results.len(),
        manifest.grid_cells,
        out.display()
    );
    for e in &outcome.errors {
        log::warn!("{e}");
    }
    Ok(outcome.all_converged())
}
