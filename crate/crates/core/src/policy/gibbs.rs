//! Gibbs policies and value functionals over finite prompt/response tables.

use crate::world::PromptDistribution;
use crate::{Error, Result};

use super::{PolicyTable, RewardTable};

/// `ν_r(y|x) ∝ π_ref(y|x) exp(r(x, y)/β)`.
pub fn gibbs_policy(rewards: &RewardTable, reference: &PolicyTable, beta: f64) -> Result<PolicyTable> {
    check_beta(beta)?;
    check_shapes(rewards, reference)?;
    if !reference.is_strictly_positive() {
        return Err(Error::arg("reference policy must be strictly positive"));
    }
    let mut probs = Vec::with_capacity(rewards.num_prompts() * rewards.num_responses());
    for x in 0..rewards.num_prompts() {
        probs.extend(gibbs_row(rewards.row(x), reference.row(x), beta));
    }
    Ok(PolicyTable::from_flat_unchecked(rewards.num_prompts(), rewards.num_responses(), probs))
}

pub(crate) fn gibbs_row(rewards: &[f64], reference: &[f64], beta: f64) -> Vec<f64> {
    let top = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if rewards.iter().all(|r| *r == top) {
        // A constant row leaves the reference untouched; skipping the
        // renormalization keeps it bit-identical.
        return reference.to_vec();
    }
    let weights: Vec<f64> = rewards
        .iter()
        .zip(reference)
        .map(|(r, p)| p * ((r - top) / beta).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|v| v / total).collect()
}

/// `β ln Σ_y π_ref(y|x) exp(r(x, y)/β)` for one prompt.
pub(crate) fn log_partition_row(rewards: &[f64], reference: &[f64], beta: f64) -> f64 {
    let top = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = rewards
        .iter()
        .zip(reference)
        .map(|(r, p)| p * ((r - top) / beta).exp())
        .sum();
    top + beta * total.ln()
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Domain { func: "beta", value: beta });
    }
    Ok(())
}

fn check_shapes(rewards: &RewardTable, policy: &PolicyTable) -> Result<()> {
    if !rewards.same_shape(policy.num_prompts(), policy.num_responses()) {
        return Err(Error::arg("reward and policy tables have different shapes"));
    }
    Ok(())
}

/// Shannon entropy (nats) of one distribution, with `0 ln 0 = 0`.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `E_{x∼ρ} H(π(·|x))`.
pub fn conditional_entropy(policy: &PolicyTable, rho: &PromptDistribution) -> f64 {
    policy.rows().zip(rho.rho()).map(|(row, w)| w * row_entropy(row)).sum()
}

/// `E_{x∼ρ, y∼π} r(x, y)`.
pub fn unregularized_value(policy: &PolicyTable, rewards: &RewardTable, rho: &PromptDistribution) -> f64 {
    policy
        .rows()
        .zip(rewards.rows())
        .zip(rho.rho())
        .map(|((p, r), w)| w * p.iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// `E_{x∼ρ} KL(π(·|x) ‖ π_ref(·|x))`; `+∞` when `π` puts mass where `π_ref` has none.
pub fn expected_kl(policy: &PolicyTable, reference: &PolicyTable, rho: &PromptDistribution) -> f64 {
    policy
        .rows()
        .zip(reference.rows())
        .zip(rho.rho())
        .map(|((p, q), w)| w * crate::complexity::kl_divergence(p, q))
        .sum()
}

/// Regularized value together with a flag for infinite divergence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlValue {
    /// `E[r] − β KL`; `−∞` when the divergence is infinite.
    pub value: f64,
    pub infinite_kl: bool,
}

/// `E_{x∼ρ, y∼π}[r − β ln(π/π_ref)]`.
pub fn kl_value(
    policy: &PolicyTable,
    rewards: &RewardTable,
    reference: &PolicyTable,
    rho: &PromptDistribution,
    beta: f64,
) -> Result<KlValue> {
    check_beta(beta)?;
    check_shapes(rewards, policy)?;
    let kl = expected_kl(policy, reference, rho);
    let value = unregularized_value(policy, rewards, rho) - beta * kl;
    Ok(KlValue {
        value,
        infinite_kl: kl.is_infinite(),
    })
}
