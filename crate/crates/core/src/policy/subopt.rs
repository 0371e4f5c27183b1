//! Suboptimality against the per-prompt optimal deterministic policy.

use serde::{Deserialize, Serialize};

use crate::data::InverseMetric;
use crate::world::{PromptDistribution, World};
use crate::{Error, Result};

use super::gibbs::unregularized_value;
use super::{PolicyTable, RewardTable};

/// `E_{x∼ρ} max_y r(x, y)`, the value of the greedy deterministic policy.
pub fn optimal_value(rewards: &RewardTable, rho: &PromptDistribution) -> f64 {
    rewards
        .rows()
        .zip(rho.rho())
        .map(|(row, w)| w * row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum()
}

/// `J(π★) − J(π)` for an arbitrary reward table.
pub fn suboptimality_table(policy: &PolicyTable, rewards: &RewardTable, rho: &PromptDistribution) -> f64 {
    optimal_value(rewards, rho) - unregularized_value(policy, rewards, rho)
}

/// `J_u(π★_u) − J_u(π)` under the world's true reward of group `u`.
pub fn suboptimality(policy: &PolicyTable, group: usize, world: &World) -> Result<f64> {
    if group >= world.num_groups() {
        return Err(Error::arg(format!("group {group} does not exist")));
    }
    if !policy.same_shape(world.features.num_prompts(), world.features.num_responses()) {
        return Err(Error::arg("policy shape does not match the world"));
    }
    Ok(suboptimality_table(policy, &world.reward_table(group), &world.prompts))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRhs {
    /// `ρ_min ξ_u − 2 η^SR E_{x∼ρ} ‖E_{y∼π(·|x)} φ(x, y)‖_{(Σ+λI)⁻¹}`.
    pub rhs: f64,
    /// Set when the bound is nonpositive and therefore says nothing.
    pub vacuous: bool,
}

/// Right-hand side of the comparison between the per-group and shared
/// pessimistic policies. `xi` is the reward-gap estimate for the group and
/// `metric` factorizes the pooled `Σ + λI`.
pub fn theorem1_rhs(world: &World, metric: &InverseMetric, eta_sr: f64, mm_policy: &PolicyTable, xi: f64) -> Result<ComparisonRhs> {
    if mm_policy.modes().iter().enumerate().any(|(x, &y)| mm_policy.get(x, y) != 1.0) {
        return Err(Error::arg("the comparison needs a deterministic policy"));
    }
    let phi = &world.features;
    let kappa: f64 = (0..phi.num_prompts())
        .map(|x| world.prompts.rho()[x] * metric.inv_norm(&phi.expected_at(x, mm_policy.row(x))))
        .sum();
    let rhs = world.prompts.rho_min() * xi - 2.0 * eta_sr * kappa;
    Ok(ComparisonRhs { rhs, vacuous: rhs <= 0.0 })
}
