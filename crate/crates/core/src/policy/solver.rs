//! Max-min fair KL-regularized policy optimization.
//!
//! Every group objective is
//! `L_u(π) = E_{ρ,π}[r_u] − η ‖E_{ρ,π} φ‖_{(Σ+λI)⁻¹} − β E_ρ KL(π ‖ π_ref)`
//! and the solver maximizes `min_u L_u`. Writing the norm as a maximum over
//! the unit ball and exchanging max and min gives the dual function
//!
//! `D(q, s) = Σ_x ρ(x) β ln Σ_y π_ref(y|x) exp(g_{q,s}(x, y)/β)`,
//! `g_{q,s}(x, y) = Σ_u q_u r_u(x, y) − η ⟨s, L⁻¹ φ(x, y)⟩`,
//!
//! over `q` in the simplex and `‖s‖ ≤ 1`, where `L` is the Cholesky factor of
//! `Σ + λI`. Any `(q, s)` bounds the optimum from above, so
//! `D(q, s) − min_u L_u(π)` certifies the quality of any candidate `π`.
//!
//! The solve runs in two phases. Entropic mirror ascent on `π` plays against
//! a Hedge adversary on the groups and the iterates are averaged. The
//! averaged adversary then warm-starts a projected-gradient descent on
//! `D`, whose Gibbs policies `ν_{g_{q,s}}` are the second source of
//! candidates. The candidate with the smaller certified gap is returned.

use serde::{Deserialize, Serialize};

use crate::data::InverseMetric;
use crate::estimation::project_simplex;
use crate::world::{FeatureMap, PromptDistribution};
use crate::{Error, Result};

use super::gibbs::{check_beta, expected_kl, log_partition_row, unregularized_value};
use super::{PolicyTable, RewardTable};

const ARMIJO: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Mirror-ascent rounds.
    pub rounds: usize,
    /// Certified gap required for `converged`; `None` means `1e-3 · β`.
    pub gap_tol: Option<f64>,
    /// Iteration budget of the dual descent.
    pub dual_iters: usize,
    /// The dual descent stops once the certified gap is at most this.
    pub dual_gap: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rounds: 5000,
            gap_tol: None,
            dual_iters: 20_000,
            dual_gap: 1e-12,
        }
    }
}

/// The `η ‖E φ‖_{(Σ+λI)⁻¹}` term shared by all groups.
#[derive(Clone, Copy, Debug)]
pub struct UncertaintyPenalty<'a> {
    pub eta: f64,
    pub features: &'a FeatureMap,
    pub metric: &'a InverseMetric,
}

#[derive(Clone, Copy, Debug)]
pub struct MaxMinProblem<'a> {
    pub rewards: &'a [RewardTable],
    pub reference: &'a PolicyTable,
    pub rho: &'a PromptDistribution,
    pub beta: f64,
    pub penalty: Option<UncertaintyPenalty<'a>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxMinSolution {
    pub policy: PolicyTable,
    /// `D(q, s) − min_u L_u(π)` for the returned policy.
    pub duality_gap: f64,
    pub converged: bool,
    /// `L_u(π)` for every group.
    pub group_objectives: Vec<f64>,
    /// Dual group weights `q` of the certificate.
    pub group_weights: Vec<f64>,
    /// Certified gap of the averaged mirror-ascent iterate alone.
    pub mirror_gap: f64,
}

/// Problem data flattened for the inner loops.
struct Instance<'a> {
    problem: MaxMinProblem<'a>,
    nx: usize,
    ny: usize,
    /// `η`, zero without a penalty.
    eta: f64,
    /// `L⁻¹ φ(x, y)` at `(x * |Y| + y) * d`.
    whitened: Vec<f64>,
    dim: usize,
}

impl<'a> Instance<'a> {
    fn new(problem: MaxMinProblem<'a>) -> Result<Self> {
        check_beta(problem.beta)?;
        let Some(first) = problem.rewards.first() else {
            return Err(Error::arg("max-min problem needs at least one group"));
        };
        let (nx, ny) = (first.num_prompts(), first.num_responses());
        if problem.rewards.iter().any(|r| !r.same_shape(nx, ny))
            || !problem.reference.same_shape(nx, ny)
            || problem.rho.len() != nx
        {
            return Err(Error::arg("reward tables, reference and prompt law disagree on shape"));
        }
        if !problem.reference.is_strictly_positive() {
            return Err(Error::arg("reference policy must be strictly positive"));
        }
        let (eta, whitened, dim) = match problem.penalty {
            Some(p) if p.eta > 0.0 => {
                if !p.features.same_shape(nx, ny) || p.metric.dim() != p.features.dim() {
                    return Err(Error::arg("penalty geometry does not match the tables"));
                }
                let mut w = Vec::with_capacity(nx * ny * p.features.dim());
                for x in 0..nx {
                    for y in 0..ny {
                        w.extend(p.metric.whiten(p.features.phi(x, y)));
                    }
                }
                (p.eta, w, p.features.dim())
            }
            Some(p) if p.eta < 0.0 || !p.eta.is_finite() => {
                return Err(Error::Domain { func: "eta", value: p.eta });
            }
            _ => (0.0, Vec::new(), 0),
        };
        Ok(Self {
            problem,
            nx,
            ny,
            eta,
            whitened,
            dim,
        })
    }

    fn groups(&self) -> usize {
        self.problem.rewards.len()
    }

    fn white(&self, x: usize, y: usize) -> &[f64] {
        let start = (x * self.ny + y) * self.dim;
        &self.whitened[start..start + self.dim]
    }

    /// `L⁻¹ E_{ρ,π} φ`.
    fn whitened_mean(&self, policy: &PolicyTable) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if self.dim == 0 {
            return out;
        }
        for x in 0..self.nx {
            let weight = self.problem.rho.rho()[x];
            for y in 0..self.ny {
                let p = weight * policy.get(x, y);
                if p != 0.0 {
                    for (o, v) in out.iter_mut().zip(self.white(x, y)) {
                        *o += p * v;
                    }
                }
            }
        }
        out
    }

    fn objectives(&self, policy: &PolicyTable) -> Vec<f64> {
        let penalty = self.eta * norm(&self.whitened_mean(policy));
        let kl = self.problem.beta * expected_kl(policy, self.problem.reference, self.problem.rho);
        self.problem
            .rewards
            .iter()
            .map(|r| unregularized_value(policy, r, self.problem.rho) - penalty - kl)
            .collect()
    }

    /// `g_{q,s}(x, ·)`.
    fn scores(&self, x: usize, weights: &[f64], direction: &[f64]) -> Vec<f64> {
        (0..self.ny)
            .map(|y| {
                let mut v: f64 = weights.iter().zip(self.problem.rewards).map(|(q, r)| q * r.get(x, y)).sum();
                if self.dim > 0 {
                    v -= self.eta * dot(direction, self.white(x, y));
                }
                v
            })
            .collect()
    }

    /// `D(q, s)` and its Gibbs policy.
    fn dual(&self, weights: &[f64], direction: &[f64]) -> (f64, PolicyTable) {
        let mut value = 0.0;
        let mut probs = Vec::with_capacity(self.nx * self.ny);
        for x in 0..self.nx {
            let scores = self.scores(x, weights, direction);
            let reference = self.problem.reference.row(x);
            value += self.problem.rho.rho()[x] * log_partition_row(&scores, reference, self.problem.beta);
            probs.extend(super::gibbs::gibbs_row(&scores, reference, self.problem.beta));
        }
        (value, PolicyTable::from_flat_unchecked(self.nx, self.ny, probs))
    }

    /// Gradient of `D` at the point whose Gibbs policy is `policy`.
    fn dual_gradient(&self, policy: &PolicyTable) -> (Vec<f64>, Vec<f64>) {
        let grad_q = self
            .problem
            .rewards
            .iter()
            .map(|r| unregularized_value(policy, r, self.problem.rho))
            .collect();
        let grad_s = self.whitened_mean(policy).into_iter().map(|v| -self.eta * v).collect();
        (grad_q, grad_s)
    }

    /// Unit vector attaining the norm of the whitened mean feature.
    fn norm_direction(&self, policy: &PolicyTable) -> Vec<f64> {
        let mean = self.whitened_mean(policy);
        let n = norm(&mean);
        if n > 0.0 {
            mean.into_iter().map(|v| v / n).collect()
        } else {
            mean
        }
    }

    fn certify(&self, policy: &PolicyTable, weights: &[f64], direction: &[f64]) -> (f64, Vec<f64>) {
        let objectives = self.objectives(policy);
        let worst = objectives.iter().copied().fold(f64::INFINITY, f64::min);
        let (upper, _) = self.dual(weights, direction);
        (upper - worst, objectives)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    crate::world::dot(a, b)
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn project_ball(v: &mut [f64]) {
    let n = norm(v);
    if n > 1.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

struct Candidate {
    policy: PolicyTable,
    gap: f64,
    objectives: Vec<f64>,
    weights: Vec<f64>,
}

/// Phase one: mirror ascent on the policy against a Hedge adversary.
fn mirror_hedge(inst: &Instance<'_>, rounds: usize) -> (PolicyTable, Vec<f64>) {
    let (nx, ny, groups) = (inst.nx, inst.ny, inst.groups());
    let beta = inst.problem.beta;
    let reference = inst.problem.reference;
    let reward_scale = inst
        .problem
        .rewards
        .iter()
        .flat_map(|r| r.rows().flat_map(|row| row.iter().map(|v| v.abs())).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    let penalty_scale = (0..nx * ny)
        .map(|i| norm(inst.white(i / ny, i % ny)))
        .fold(0.0, f64::max)
        * inst.eta;
    let scale = (reward_scale + penalty_scale).max(1e-12);
    let step = 0.5 * (1.0 / beta).min(1.0 / scale);
    let hedge_step = (8.0 * (groups.max(2) as f64).ln() / rounds.max(1) as f64).sqrt() / (2.0 * scale + beta);

    let log_ref: Vec<f64> = reference.rows().flat_map(|r| r.iter().map(|v| v.ln())).collect();
    let mut log_policy = log_ref.clone();
    let mut weights = vec![1.0 / groups as f64; groups];
    let mut policy_sum = vec![0.0; nx * ny];
    let mut weight_sum = vec![0.0; groups];

    for _ in 0..rounds {
        let policy = PolicyTable::from_flat_unchecked(nx, ny, log_policy.iter().map(|v| v.exp()).collect());
        for (acc, p) in policy_sum.iter_mut().zip(policy.rows().flatten()) {
            *acc += p;
        }
        for (acc, q) in weight_sum.iter_mut().zip(&weights) {
            *acc += q;
        }
        let objectives = inst.objectives(&policy);
        let direction = inst.norm_direction(&policy);

        let shift = objectives.iter().copied().fold(f64::INFINITY, f64::min);
        for (q, value) in weights.iter_mut().zip(&objectives) {
            *q *= (-hedge_step * (value - shift)).exp();
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|q| *q /= total);

        for x in 0..nx {
            let scores = inst.scores(x, &weights, &direction);
            let row = &mut log_policy[x * ny..(x + 1) * ny];
            let lref = &log_ref[x * ny..(x + 1) * ny];
            for y in 0..ny {
                row[y] = (1.0 - step * beta) * row[y] + step * beta * lref[y] + step * scores[y];
            }
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_total = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= log_total);
        }
    }
    let count = rounds.max(1) as f64;
    let averaged = if rounds == 0 {
        reference.clone()
    } else {
        let mut probs: Vec<f64> = policy_sum.into_iter().map(|v| v / count).collect();
        for row in probs.chunks_mut(ny) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        PolicyTable::from_flat_unchecked(nx, ny, probs)
    };
    let weights = if rounds == 0 {
        weights
    } else {
        weight_sum.into_iter().map(|v| v / count).collect()
    };
    (averaged, weights)
}

fn frobenius_step(weights: &[f64], direction: &[f64], grad_q: &[f64], grad_s: &[f64], step: f64) -> (Vec<f64>, Vec<f64>) {
    let q: Vec<f64> = weights.iter().zip(grad_q).map(|(a, g)| a - step * g).collect();
    let q = project_simplex(&q);
    let mut s: Vec<f64> = direction.iter().zip(grad_s).map(|(a, g)| a - step * g).collect();
    project_ball(&mut s);
    (q, s)
}

/// Phase two: projected-gradient descent on the dual function.
fn dual_descent(inst: &Instance<'_>, start_weights: Vec<f64>, start_direction: Vec<f64>, opts: &SolverOptions) -> Candidate {
    let mut weights = start_weights;
    let mut direction = start_direction;
    let (mut value, mut policy) = inst.dual(&weights, &direction);
    let mut best: Option<Candidate> = None;
    let mut previous: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    let mut step = inst.problem.beta;

    for _ in 0..=opts.dual_iters {
        let (gap, objectives) = inst.certify(&policy, &weights, &direction);
        if best.as_ref().is_none_or(|b| gap < b.gap) {
            best = Some(Candidate {
                policy: policy.clone(),
                gap,
                objectives,
                weights: weights.clone(),
            });
        }
        if gap <= opts.dual_gap {
            break;
        }
        let (grad_q, grad_s) = inst.dual_gradient(&policy);
        if let Some((pq, ps, pgq, pgs)) = &previous {
            let mut ss = 0.0;
            let mut sy = 0.0;
            for (i, w) in weights.iter().enumerate() {
                let s = w - pq[i];
                ss += s * s;
                sy += s * (grad_q[i] - pgq[i]);
            }
            for (i, d) in direction.iter().enumerate() {
                let s = d - ps[i];
                ss += s * s;
                sy += s * (grad_s[i] - pgs[i]);
            }
            if sy > 0.0 && ss > 0.0 {
                step = (ss / sy).clamp(1e-12, 1e12);
            }
        }
        let mut accepted = None;
        let mut trial = step;
        for _ in 0..60 {
            let (q, s) = frobenius_step(&weights, &direction, &grad_q, &grad_s, trial);
            let mut decrease = 0.0;
            for (i, g) in grad_q.iter().enumerate() {
                decrease += g * (q[i] - weights[i]);
            }
            for (i, g) in grad_s.iter().enumerate() {
                decrease += g * (s[i] - direction[i]);
            }
            if decrease >= 0.0 {
                break;
            }
            let (v, p) = inst.dual(&q, &s);
            let below_resolution = -ARMIJO * decrease < 1e-15 * value.abs();
            if v <= value + ARMIJO * decrease || (below_resolution && v <= value) {
                accepted = Some((q, s, v, p));
                break;
            }
            trial *= 0.5;
        }
        let Some((q, s, v, p)) = accepted else {
            break;
        };
        previous = Some((weights, direction, grad_q, grad_s));
        weights = q;
        direction = s;
        value = v;
        policy = p;
    }
    best.expect("at least one certificate")
}

/// Solves `max_π min_u L_u(π)` and certifies the result with a duality gap.
pub fn solve_maxmin_policy(problem: MaxMinProblem<'_>, opts: &SolverOptions) -> Result<MaxMinSolution> {
    let inst = Instance::new(problem)?;
    let gap_tol = opts.gap_tol.unwrap_or(1e-3 * problem.beta);

    let (averaged, averaged_weights) = mirror_hedge(&inst, opts.rounds);
    let averaged_direction = inst.norm_direction(&averaged);
    let (mirror_gap, mirror_objectives) = inst.certify(&averaged, &averaged_weights, &averaged_direction);
    let mirror = Candidate {
        policy: averaged,
        gap: mirror_gap,
        objectives: mirror_objectives,
        weights: averaged_weights.clone(),
    };
    let polished = dual_descent(&inst, averaged_weights, averaged_direction, opts);
    let best = if polished.gap < mirror.gap { polished } else { mirror };
    Ok(MaxMinSolution {
        converged: best.gap <= gap_tol,
        policy: best.policy,
        duality_gap: best.gap,
        group_objectives: best.objectives,
        group_weights: best.weights,
        mirror_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::gibbs_policy;
    use crate::rng::{stream_rng, Stream};
    use nalgebra::DMatrix;
    use rand::Rng;

    fn random_table(rng: &mut impl Rng, nx: usize, ny: usize) -> RewardTable {
        RewardTable::from_fn(nx, ny, |_, _| 2.0 * rng.random::<f64>() - 1.0)
    }

    fn problem<'a>(rewards: &'a [RewardTable], reference: &'a PolicyTable, rho: &'a PromptDistribution, beta: f64) -> MaxMinProblem<'a> {
        MaxMinProblem {
            rewards,
            reference,
            rho,
            beta,
            penalty: None,
        }
    }

    #[test]
    fn single_group_recovers_gibbs() {
        let mut rng = stream_rng(1, Stream::Instance, 0);
        for beta in [0.1, 1.0, 10.0] {
            let r = vec![random_table(&mut rng, 4, 5)];
            let reference = PolicyTable::uniform(4, 5);
            let rho = PromptDistribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
            let sol = solve_maxmin_policy(problem(&r, &reference, &rho, beta), &SolverOptions::default()).unwrap();
            let exact = gibbs_policy(&r[0], &reference, beta).unwrap();
            assert!(sol.policy.max_row_tv(&exact) <= 1e-4);
            assert!(sol.converged && sol.duality_gap <= 1e-9);
            sol.policy.validate().unwrap();
        }
    }

    #[test]
    fn identical_groups_match_single_group() {
        let mut rng = stream_rng(2, Stream::Instance, 0);
        let r = random_table(&mut rng, 3, 4);
        let reference = PolicyTable::uniform(3, 4);
        let rho = PromptDistribution::uniform(3);
        let one = solve_maxmin_policy(problem(std::slice::from_ref(&r), &reference, &rho, 0.5), &SolverOptions::default()).unwrap();
        let pair = [r.clone(), r];
        let two = solve_maxmin_policy(problem(&pair, &reference, &rho, 0.5), &SolverOptions::default()).unwrap();
        assert!(one.policy.max_row_tv(&two.policy) <= 1e-6);
    }

    #[test]
    fn two_groups_match_grid_oracle() {
        let mut rng = stream_rng(3, Stream::Instance, 0);
        for case in 0..10 {
            let beta = [0.1, 1.0, 10.0][case % 3];
            let tables = [random_table(&mut rng, 1, 2), random_table(&mut rng, 1, 2)];
            let reference = PolicyTable::uniform(1, 2);
            let rho = PromptDistribution::uniform(1);
            let sol = solve_maxmin_policy(problem(&tables, &reference, &rho, beta), &SolverOptions::default()).unwrap();
            let solver_value = sol.group_objectives.iter().copied().fold(f64::INFINITY, f64::min);
            let mut grid_best = f64::NEG_INFINITY;
            for i in 0..=10_000 {
                let p = i as f64 * 1e-4;
                let kl = |a: f64| if a > 0.0 { a * (a / 0.5).ln() } else { 0.0 };
                let divergence = kl(p) + kl(1.0 - p);
                let worst = tables
                    .iter()
                    .map(|t| p * t.get(0, 0) + (1.0 - p) * t.get(0, 1) - beta * divergence)
                    .fold(f64::INFINITY, f64::min);
                grid_best = grid_best.max(worst);
            }
            assert!((solver_value - grid_best).abs() <= 1e-3, "case {case}: {solver_value} vs {grid_best}");
            assert!(sol.duality_gap <= 1e-6);
        }
    }

    #[test]
    fn penalized_problem_certifies_small_gap() {
        let mut rng = stream_rng(4, Stream::Instance, 0);
        let rows: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let phi = FeatureMap::from_rows(3, 4, &rows, 2.0).unwrap();
        let metric = InverseMetric::new(&DMatrix::identity(3, 3), 0.1).unwrap();
        let tables = [random_table(&mut rng, 3, 4), random_table(&mut rng, 3, 4), random_table(&mut rng, 3, 4)];
        let reference = PolicyTable::uniform(3, 4);
        let rho = PromptDistribution::uniform(3);
        let p = MaxMinProblem {
            penalty: Some(UncertaintyPenalty {
                eta: 0.7,
                features: &phi,
                metric: &metric,
            }),
            ..problem(&tables, &reference, &rho, 0.3)
        };
        let sol = solve_maxmin_policy(p, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.duality_gap <= 1e-6, "gap {}", sol.duality_gap);
        assert!(sol.duality_gap >= -1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let r = [RewardTable::from_fn(1, 2, |_, _| 0.0)];
        let reference = PolicyTable::uniform(1, 2);
        let rho = PromptDistribution::uniform(1);
        assert!(solve_maxmin_policy(problem(&r, &reference, &rho, 0.0), &SolverOptions::default()).is_err());
        assert!(solve_maxmin_policy(problem(&[], &reference, &rho, 1.0), &SolverOptions::default()).is_err());
    }
}
