//! One seeded end-to-end trial.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::complexity::{gap_profile, kl_gibbs_bound_check, n_maxmin, psi_u, ComplexityInputs};
use crate::data::{compute_covariances, sample_dataset, CovarianceStats, InverseMetric};
use crate::estimation::{fit_maxmin, fit_sharedrep, param_error, ConfidenceSpec};
use crate::policy::{
    gibbs_policy, kl_value, pessimistic_best_response, solve_maxmin_policy, suboptimality, theorem1_rhs, unregularized_value,
    worst_group_by_entropy, worst_group_by_reward, MaxMinProblem, MaxMinSolution, PolicyTable, RewardTable, UncertaintyPenalty,
};
use crate::world::{build_world, World};
use crate::{Error, Result};

use super::{estimate_xi_inf, Method, ScenarioConfig};

/// Certified gap below which the worst-group rules are compared.
pub const AGREEMENT_GAP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// `J_u(π★_u) − J_u(π)` for the method's max-min policy `π`.
    pub subopt: f64,
    /// `E[r★_u]` under `π`.
    pub unregularized_value: f64,
    /// `E[r★_u] − β KL(π ‖ π_ref)`.
    pub kl_value: f64,
    /// `‖θ̂_u − θ★_u‖_{Σ+λI}` (pooled `Σ`).
    pub param_error: f64,
    /// Confidence width attached to the group's estimate.
    pub eta: f64,
    /// Suboptimality of the group's own pessimistic best response.
    pub best_response_subopt: f64,
    /// `KL(ν★_u ‖ ν̃_u)` for the shared-representation estimate.
    pub measured_kl: Option<f64>,
    pub kl_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    /// Fit and policy solve both converged.
    pub converged: bool,
    pub duality_gap: f64,
    pub groups: Vec<GroupMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub n: usize,
    pub minority_prop: f64,
    /// Group that received the minority share.
    pub minority_group: usize,
    pub methods: Vec<MethodResult>,
    /// Whether the reward and entropy rules pick the same worst group under
    /// the true rewards; absent when the skyline gap is not certified or a
    /// rule is tied.
    pub group_selection_agreement: Option<bool>,
    /// `max_u ψ_u` at the pooled covariance of this trial.
    pub psi_max: f64,
    /// Entropy gap of the true Gibbs policies; absent on a top tie.
    pub delta_min: Option<f64>,
    /// Worst-group identification sample size at `delta_min`.
    pub n_maxmin: Option<f64>,
    /// Comparison bound for the minority group, when requested.
    pub comparison_bound: Option<ComparisonBound>,
    pub wall_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonBound {
    pub xi_estimate: f64,
    pub rhs: f64,
    /// `SubOpt(π̂^MM) − SubOpt(π̂^SR)` for the minority group.
    pub lhs: f64,
    pub vacuous: bool,
}

impl TrialResult {
    pub fn method(&self, m: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn all_converged(&self) -> bool {
        self.methods.iter().all(|m| m.converged)
    }
}

struct Context<'a> {
    scenario: &'a ScenarioConfig,
    world: &'a World,
    stats: &'a CovarianceStats,
    pooled: &'a InverseMetric,
    spec: &'a ConfidenceSpec,
    truth: &'a [RewardTable],
    n: usize,
}

impl Context<'_> {
    fn solve(&self, rewards: &[RewardTable], eta: f64) -> Result<MaxMinSolution> {
        let penalty = (eta > 0.0).then_some(UncertaintyPenalty {
            eta,
            features: &self.world.features,
            metric: self.pooled,
        });
        solve_maxmin_policy(
            MaxMinProblem {
                rewards,
                reference: &self.world.truth.ref_policy,
                rho: &self.world.prompts,
                beta: self.scenario.beta,
                penalty,
            },
            &self.scenario.solver,
        )
    }

    fn evaluate(&self, policy: &PolicyTable, u: usize) -> Result<(f64, f64, f64)> {
        let subopt = suboptimality(policy, u, self.world)?;
        let value = unregularized_value(policy, &self.truth[u], &self.world.prompts);
        let regularized = kl_value(policy, &self.truth[u], &self.world.truth.ref_policy, &self.world.prompts, self.scenario.beta)?.value;
        Ok((subopt, value, regularized))
    }
}

/// Runs one `(seed, n, minority)` cell of a scenario.
pub fn run_trial(scenario: &ScenarioConfig, seed: u64, n: usize, minority_prop: f64) -> Result<TrialResult> {
    run_inner(scenario, seed, n, minority_prop).map_err(|e| Error::Trial {
        seed,
        n,
        minority: minority_prop,
        source: Box::new(e),
    })
}

fn run_inner(scenario: &ScenarioConfig, seed: u64, n: usize, minority_prop: f64) -> Result<TrialResult> {
    scenario.validate()?;
    let started = Instant::now();
    let world = build_world(&scenario.world_for_seed(seed))?;
    let num_groups = world.num_groups();
    let truth = world.reward_tables();
    let gold = solve_plain(scenario, &world, &truth)?;
    let minority = scenario.minority_group().unwrap_or(0);
    let proportions = scenario.proportions_for(minority_prop, minority);
    let dataset = sample_dataset(&world, n, &proportions, &scenario.sampling, seed)?;
    let lambda = scenario.lambda_rule.lambda(n);
    let stats = compute_covariances(&dataset, lambda);
    let pooled = stats.pooled_metric()?;
    let spec = ConfidenceSpec::with_constants(
        world.config.feature_dim,
        lambda,
        scenario.delta,
        world.config.b_max,
        world.config.l_max,
        scenario.c_sr,
        scenario.c_mm,
    )?;
    let ctx = Context {
        scenario,
        world: &world,
        stats: &stats,
        pooled: &pooled,
        spec: &spec,
        truth: &truth,
        n,
    };
    let fit_opts = crate::estimation::FitOptions {
        seed,
        ..scenario.fit.clone()
    };
    let eta_sr = spec.eta_sr(n)?;

    let mut methods = Vec::with_capacity(scenario.methods.len());
    let mut best_responses: Vec<(Method, PolicyTable)> = Vec::new();
    for &method in &scenario.methods {
        let result = match method {
            Method::Sharedrep => {
                let (params, report) = fit_sharedrep(&dataset, world.config.shared_dim, world.config.b_max, &fit_opts)?;
                let thetas: Vec<Vec<f64>> = (0..num_groups).map(|u| params.theta_of(u)).collect();
                let eta = if scenario.pessimism { eta_sr } else { 0.0 };
                let mr = estimated_method(&ctx, method, &thetas, report.converged, eta, |_| Ok(eta_sr), |_| Ok(pooled.clone()))?;
                best_responses.push((method, pessimistic_best_response(&thetas[minority], &pooled, eta_sr, &world.features)?));
                mr
            }
            Method::Maxmin => {
                let (params, report) = fit_maxmin(&dataset, world.config.b_max, &fit_opts)?;
                let thetas: Vec<Vec<f64>> = (0..num_groups).map(|u| params.theta_of(u)).collect();
                let widths = |u: usize| spec.eta_mm(dataset.n_per_group()[u]);
                let metrics = |u: usize| stats.group_metric(u);
                let mr = estimated_method(&ctx, method, &thetas, report.converged, 0.0, widths, metrics)?;
                best_responses.push((
                    method,
                    pessimistic_best_response(&thetas[minority], &stats.group_metric(minority)?, widths(minority)?, &world.features)?,
                ));
                mr
            }
            Method::Gold => {
                let solution = &gold;
                let mut groups = Vec::with_capacity(num_groups);
                for u in 0..num_groups {
                    let (subopt, unregularized_value, kl_value) = ctx.evaluate(&solution.policy, u)?;
                    groups.push(GroupMetrics {
                        subopt,
                        unregularized_value,
                        kl_value,
                        param_error: 0.0,
                        eta: 0.0,
                        best_response_subopt: 0.0,
                        measured_kl: Some(0.0),
                        kl_bound: None,
                    });
                }
                MethodResult {
                    method,
                    converged: solution.converged,
                    duality_gap: solution.duality_gap,
                    groups,
                }
            }
        };
        methods.push(result);
    }

    let group_selection_agreement = lemma_agreement(&ctx, &gold)?;
    let psi: Vec<f64> = (0..num_groups)
        .map(|u| psi_u(&world, &pooled, &spec, scenario.beta, u))
        .collect::<Result<_>>()?;
    let psi_max = psi.iter().copied().fold(0.0, f64::max);
    let (delta_min, n_maxmin) = identification_cost(&ctx, psi)?;

    let comparison_bound = match (scenario.xi_samples, find(&best_responses, Method::Sharedrep), find(&best_responses, Method::Maxmin)) {
        (m, Some(sr), Some(mm)) if m > 0 => {
            let xi = estimate_xi_inf(&world, m, seed)?;
            let bound = theorem1_rhs(&world, &pooled, eta_sr, mm, xi)?;
            let lhs = suboptimality(mm, minority, &world)? - suboptimality(sr, minority, &world)?;
            Some(ComparisonBound {
                xi_estimate: xi,
                rhs: bound.rhs,
                lhs,
                vacuous: bound.vacuous,
            })
        }
        _ => None,
    };

    Ok(TrialResult {
        seed,
        n,
        minority_prop,
        minority_group: minority,
        methods,
        group_selection_agreement,
        psi_max,
        delta_min,
        n_maxmin,
        comparison_bound,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

fn find(list: &[(Method, PolicyTable)], m: Method) -> Option<&PolicyTable> {
    list.iter().find(|(k, _)| *k == m).map(|(_, p)| p)
}

fn estimated_method(
    ctx: &Context<'_>,
    method: Method,
    thetas: &[Vec<f64>],
    fit_converged: bool,
    policy_eta: f64,
    width: impl Fn(usize) -> Result<f64>,
    metric: impl Fn(usize) -> Result<InverseMetric>,
) -> Result<MethodResult> {
    let world = ctx.world;
    let rewards: Vec<RewardTable> = thetas.iter().map(|t| RewardTable::linear(&world.features, t)).collect();
    let solution = ctx.solve(&rewards, policy_eta)?;
    let n = ctx.stats.sigma_per_group.len();
    let mut groups = Vec::with_capacity(n);
    for (u, theta) in thetas.iter().enumerate() {
        let (subopt, unregularized_value, kl_value) = ctx.evaluate(&solution.policy, u)?;
        let eta_u = width(u)?;
        let br = pessimistic_best_response(theta, &metric(u)?, eta_u, &world.features)?;
        let (measured_kl, kl_bound) = if method == Method::Sharedrep {
            let check = kl_gibbs_bound_check(world, theta, ctx.pooled, ctx.spec, ctx.n, ctx.scenario.beta, u)?;
            (Some(check.measured_kl), Some(check.bound_leading_term))
        } else {
            (None, None)
        };
        groups.push(GroupMetrics {
            subopt,
            unregularized_value,
            kl_value,
            param_error: param_error(theta, &world.truth.theta(u), ctx.pooled),
            eta: eta_u,
            best_response_subopt: suboptimality(&br, u, world)?,
            measured_kl,
            kl_bound,
        });
    }
    Ok(MethodResult {
        method,
        converged: fit_converged && solution.converged,
        duality_gap: solution.duality_gap,
        groups,
    })
}

/// Compares the two worst-group rules on the true rewards.
fn lemma_agreement(ctx: &Context<'_>, solution: &MaxMinSolution) -> Result<Option<bool>> {
    if solution.duality_gap > AGREEMENT_GAP {
        return Ok(None);
    }
    let by_reward = worst_group_by_reward(&solution.policy, ctx.truth, &ctx.world.prompts)?;
    let gibbs = true_gibbs_all(ctx)?;
    let by_entropy = worst_group_by_entropy(&gibbs, &ctx.world.prompts)?;
    if by_reward.tie || by_entropy.tie {
        return Ok(None);
    }
    Ok(Some(by_reward.chosen == by_entropy.chosen))
}

/// Entropy gap of the true Gibbs policies and the matching identification
/// sample size; both absent when the top entropy is tied or `U = 1`.
fn identification_cost(ctx: &Context<'_>, psi: Vec<f64>) -> Result<(Option<f64>, Option<f64>)> {
    let gibbs = true_gibbs_all(ctx)?;
    let gap = match gap_profile(&gibbs, &ctx.world.prompts) {
        Ok(g) if g.delta_min.is_finite() => g,
        Ok(_) | Err(Error::DegenerateGap(..)) => return Ok((None, None)),
        Err(e) => return Err(e),
    };
    let inputs = ComplexityInputs::new(ctx.world.features.num_responses(), ctx.scenario.beta, ctx.spec.clone(), psi, &gap, None);
    Ok((Some(gap.delta_min), Some(n_maxmin(&inputs, &gap)?)))
}

fn true_gibbs_all(ctx: &Context<'_>) -> Result<Vec<PolicyTable>> {
    ctx.truth
        .iter()
        .map(|r| gibbs_policy(r, &ctx.world.truth.ref_policy, ctx.scenario.beta))
        .collect()
}

/// Max-min policy of the true rewards without a penalty.
fn solve_plain(scenario: &ScenarioConfig, world: &World, truth: &[RewardTable]) -> Result<MaxMinSolution> {
    solve_maxmin_policy(
        MaxMinProblem {
            rewards: truth,
            reference: &world.truth.ref_policy,
            rho: &world.prompts,
            beta: scenario.beta,
            penalty: None,
        },
        &scenario.solver,
    )
}
