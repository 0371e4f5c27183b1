//! Pessimistic values over ellipsoidal confidence sets and the matching
//! per-prompt best responses.

use crate::data::InverseMetric;
use crate::world::{dot, FeatureMap, PromptDistribution};
use crate::{Error, Result};

use super::{argmax_first, PolicyTable};

#[derive(Clone, Debug, PartialEq)]
pub struct PessimisticValueResult {
    /// `min_{θ ∈ C} ⟨E φ, θ⟩` over `C = {θ : ‖θ − θ̂‖_{Σ+λI} ≤ η}`.
    pub value: f64,
    /// The boundary point of `C` attaining the minimum.
    pub minimizing_direction: Vec<f64>,
    /// `⟨E φ, θ̂⟩`.
    pub plug_in: f64,
}

/// Closed-form worst case of the expected reward over the confidence ellipsoid:
/// `⟨m, θ̂⟩ − η ‖m‖_{(Σ+λI)⁻¹}` with `m = E_{x∼ρ, y∼π} φ(x, y)`.
pub fn pessimistic_value(
    policy: &PolicyTable,
    theta_hat: &[f64],
    metric: &InverseMetric,
    eta: f64,
    phi: &FeatureMap,
    rho: &PromptDistribution,
) -> Result<PessimisticValueResult> {
    if theta_hat.len() != phi.dim() || metric.dim() != phi.dim() {
        return Err(Error::arg("parameter, metric and features disagree on dimension"));
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::Domain { func: "eta", value: eta });
    }
    let mean = phi.expected(policy, rho);
    let plug_in = dot(&mean, theta_hat);
    let spread = metric.inv_norm(&mean);
    if spread == 0.0 {
        return Ok(PessimisticValueResult {
            value: plug_in,
            minimizing_direction: theta_hat.to_vec(),
            plug_in,
        });
    }
    let solved = metric.solve(&mean);
    let minimizing_direction = theta_hat
        .iter()
        .zip(&solved)
        .map(|(t, s)| t - eta * s / spread)
        .collect();
    Ok(PessimisticValueResult {
        value: plug_in - eta * spread,
        minimizing_direction,
        plug_in,
    })
}

/// Per-prompt argmax of `⟨φ(x, y), θ̂⟩ − η ‖φ(x, y)‖_{(Σ+λI)⁻¹}`, ties to the
/// lowest response index.
pub fn pessimistic_best_response(theta_hat: &[f64], metric: &InverseMetric, eta: f64, phi: &FeatureMap) -> Result<PolicyTable> {
    if theta_hat.len() != phi.dim() || metric.dim() != phi.dim() {
        return Err(Error::arg("parameter, metric and features disagree on dimension"));
    }
    let choice: Vec<usize> = (0..phi.num_prompts())
        .map(|x| {
            let scores: Vec<f64> = (0..phi.num_responses())
                .map(|y| {
                    let f = phi.phi(x, y);
                    dot(f, theta_hat) - eta * metric.inv_norm(f)
                })
                .collect();
            argmax_first(&scores)
        })
        .collect();
    Ok(PolicyTable::point_masses(phi.num_responses(), &choice))
}
