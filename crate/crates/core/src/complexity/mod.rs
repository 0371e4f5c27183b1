//! Closed-form sample-complexity quantities.
//!
//! Entropy inequalities, the Lambert `W₋₁` branch, the entropy modulus `f`
//! and its inverse, entropy gaps between groups, the dataset-dependent
//! constants `ψ_u`, and the resulting sample-size formulas. Every `O(·)`
//! constant is a configurable multiplier that defaults to 1.

mod closed_form;
mod inequalities;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use closed_form::{entropy_modulus_constant, f_breakpoint, f_inverse_half_delta, f_of, lambert_w_minus1, Regime, BRANCH_POINT};
pub use inequalities::{binary_entropy, entropy, fannes_bound, kl_divergence, tv_distance};

use crate::data::InverseMetric;
use crate::estimation::ConfidenceSpec;
use crate::policy::{conditional_entropy, expected_kl, gibbs_policy, PolicyTable, RewardTable, TIE_TOL};
use crate::world::{PromptDistribution, World};
use crate::{Error, Result};

/// Entropy gaps between the highest-entropy group and every other group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapProfile {
    /// `|H(ν★_{u★}) − H(ν★_u)|`, zero at `u★`.
    pub delta_u: Vec<f64>,
    /// Smallest gap over `u ≠ u★`; `+∞` for a single group.
    pub delta_min: f64,
    pub u_star: usize,
}

/// Builds the gap profile from each group's Gibbs policy.
pub fn gap_profile(gibbs: &[PolicyTable], rho: &PromptDistribution) -> Result<GapProfile> {
    if gibbs.is_empty() {
        return Err(Error::arg("gap profile needs at least one group"));
    }
    let entropies: Vec<f64> = gibbs.iter().map(|p| conditional_entropy(p, rho)).collect();
    let mut u_star = 0;
    for (u, &h) in entropies.iter().enumerate() {
        if h > entropies[u_star] {
            u_star = u;
        }
    }
    let top = entropies[u_star];
    if let Some(other) = (0..entropies.len()).find(|&u| u != u_star && (entropies[u] - top).abs() <= TIE_TOL) {
        return Err(Error::DegenerateGap(u_star.min(other), u_star.max(other)));
    }
    let delta_u: Vec<f64> = entropies.iter().map(|h| (top - h).abs()).collect();
    let delta_min = delta_u
        .iter()
        .enumerate()
        .filter(|(u, _)| *u != u_star)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    Ok(GapProfile {
        delta_u,
        delta_min,
        u_star,
    })
}

/// `(1/β²)(C_δ + B_max²)(max_x E_{y∼ν★_u(·|x)} ‖φ(x, y)‖_{(Σ+λI)⁻¹})²`.
pub fn psi_u(world: &World, metric: &InverseMetric, spec: &ConfidenceSpec, beta: f64, group: usize) -> Result<f64> {
    let gibbs = true_gibbs(world, beta, group)?;
    let phi = &world.features;
    let worst = (0..phi.num_prompts())
        .map(|x| {
            (0..phi.num_responses())
                .map(|y| gibbs.get(x, y) * metric.inv_norm(phi.phi(x, y)))
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    Ok((spec.c_delta + spec.b_max * spec.b_max) * worst * worst / (beta * beta))
}

fn true_gibbs(world: &World, beta: f64, group: usize) -> Result<PolicyTable> {
    if group >= world.num_groups() {
        return Err(Error::arg(format!("group {group} does not exist")));
    }
    gibbs_policy(&world.reward_table(group), &world.truth.ref_policy, beta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityInputs {
    pub y_size: usize,
    pub beta: f64,
    pub spec: ConfidenceSpec,
    pub psi_u: Vec<f64>,
    /// Chosen by the `(2/e) c` threshold unless overridden.
    pub regime: Regime,
    /// Common value of every `O(·)` constant.
    pub multiplier: f64,
}

impl ComplexityInputs {
    pub fn new(y_size: usize, beta: f64, spec: ConfidenceSpec, psi_u: Vec<f64>, gap: &GapProfile, regime_override: Option<Regime>) -> Self {
        Self {
            y_size,
            beta,
            spec,
            psi_u,
            regime: regime_override.unwrap_or_else(|| Regime::of(gap.delta_min, y_size)),
            multiplier: 1.0,
        }
    }

    pub fn with_multiplier(self, multiplier: f64) -> Self {
        Self { multiplier, ..self }
    }
}

/// Samples sufficient to identify the worst group:
/// `max_u ψ_u (c/Δ_min)⁴` with a large gap and `max_u ψ_u exp(−4 W₋₁(−Δ_min/(2c)))` with a small one.
pub fn n_maxmin(inputs: &ComplexityInputs, gap: &GapProfile) -> Result<f64> {
    let delta = gap.delta_min;
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Domain { func: "n_maxmin", value: delta });
    }
    let c = entropy_modulus_constant(inputs.y_size);
    let psi = inputs.psi_u.iter().copied().fold(0.0, f64::max);
    let factor = match inputs.regime {
        Regime::LargeGap => (c / delta).powi(4),
        Regime::SmallGap => (-4.0 * lambert_w_minus1(-delta / (2.0 * c))?).exp(),
    };
    Ok(inputs.multiplier * psi * factor)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedRepSampleSize {
    pub n_maxmin: f64,
    /// `C_δ/ε² ‖E_{π★} φ‖²_{(Σ+λI)⁻¹}`.
    pub epsilon_term: f64,
    /// Larger of the two terms.
    pub n_sr: f64,
}

/// Samples sufficient for an `ε`-suboptimal shared-representation policy.
pub fn n_sr(inputs: &ComplexityInputs, gap: &GapProfile, pistar_feature_norm: f64, epsilon: f64) -> Result<SharedRepSampleSize> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain { func: "n_sr", value: epsilon });
    }
    let n_maxmin = n_maxmin(inputs, gap)?;
    let epsilon_term = inputs.multiplier * inputs.spec.c_delta / (epsilon * epsilon) * pistar_feature_norm * pistar_feature_norm;
    Ok(SharedRepSampleSize {
        n_maxmin,
        epsilon_term,
        n_sr: n_maxmin.max(epsilon_term),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlBoundCheck {
    /// `E_{x∼ρ} KL(ν★_u(·|x) ‖ ν̃_u(·|x))`.
    pub measured_kl: f64,
    /// `(2/β) η^SR(N) E_{x∼ρ, y∼ν★_u} ‖φ(x, y)‖_{(Σ+λI)⁻¹}`.
    pub bound_leading_term: f64,
}

/// Compares the divergence between the true and the fitted Gibbs policy of a
/// group with the leading term of its upper bound. `metric` factorizes the
/// pooled `Σ + λI` with `λ = spec.lambda`, and `n` is the dataset size.
pub fn kl_gibbs_bound_check(
    world: &World,
    theta_hat: &[f64],
    metric: &InverseMetric,
    spec: &ConfidenceSpec,
    n: usize,
    beta: f64,
    group: usize,
) -> Result<KlBoundCheck> {
    let truth = true_gibbs(world, beta, group)?;
    let fitted = gibbs_policy(&RewardTable::linear(&world.features, theta_hat), &world.truth.ref_policy, beta)?;
    let measured_kl = expected_kl(&truth, &fitted, &world.prompts);
    let phi = &world.features;
    let spread: f64 = (0..phi.num_prompts())
        .map(|x| {
            world.prompts.rho()[x]
                * (0..phi.num_responses())
                    .map(|y| truth.get(x, y) * metric.inv_norm(phi.phi(x, y)))
                    .sum::<f64>()
        })
        .sum();
    let bound_leading_term = 2.0 / beta * spec.eta_sr(n)? * spread;
    Ok(KlBoundCheck {
        measured_kl,
        bound_leading_term,
    })
}

/// Writes `(n, measured_kl, bound_leading_term)` rows.
pub fn write_kl_curve(path: &Path, rows: &[(usize, KlBoundCheck)]) -> Result<()> {
    let data: Vec<Vec<f64>> = rows
        .iter()
        .map(|(n, c)| vec![*n as f64, c.measured_kl, c.bound_leading_term])
        .collect();
    crate::io::write_numeric_csv(path, &["n", "measured_kl", "bound_leading_term"], &data)
}

/// Writes `(delta_min, n_maxmin)` rows.
pub fn write_gap_curve(path: &Path, rows: &[(f64, f64)]) -> Result<()> {
    let data: Vec<Vec<f64>> = rows.iter().map(|(d, n)| vec![*d, *n]).collect();
    crate::io::write_numeric_csv(path, &["delta_min", "n_maxmin"], &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_covariances, sample_dataset, SamplingOptions};
    use crate::world::{build_world, FeatureMap, GroundTruth, WorldConfig};
    use nalgebra::DMatrix;
    use std::f64::consts::LN_2;

    #[test]
    fn two_group_profile() {
        let rho = PromptDistribution::uniform(1);
        let g = vec![PolicyTable::uniform(1, 4), PolicyTable::from_rows(&[vec![0.5, 0.5, 0.0, 0.0]]).unwrap()];
        let p = gap_profile(&g, &rho).unwrap();
        assert_eq!(p.u_star, 0);
        assert!((p.delta_min - LN_2).abs() < 1e-15);
        let swapped = vec![g[1].clone(), g[0].clone()];
        let q = gap_profile(&swapped, &rho).unwrap();
        assert_eq!(q.u_star, 1);
        assert_eq!(q.delta_u, vec![p.delta_u[1], p.delta_u[0]]);
        assert_eq!(q.delta_min, p.delta_min);
        let single = gap_profile(&g[..1], &rho).unwrap();
        assert_eq!(single.delta_min, f64::INFINITY);
        assert!(matches!(gap_profile(&[g[0].clone(), g[0].clone()], &rho), Err(Error::DegenerateGap(0, 1))));
    }

    fn spec() -> ConfidenceSpec {
        ConfidenceSpec::new(16, 0.01, 0.1, 2.0, 1.0).unwrap()
    }

    fn inputs(regime: Option<Regime>, delta: f64) -> (ComplexityInputs, GapProfile) {
        let gap = GapProfile {
            delta_u: vec![0.0, delta],
            delta_min: delta,
            u_star: 0,
        };
        (ComplexityInputs::new(6, 1.0, spec(), vec![3.0, 5.0], &gap, regime), gap)
    }

    #[test]
    fn scaling_laws() {
        let c = entropy_modulus_constant(6);
        let big = 3.0 * c;
        let (inp, gap) = inputs(None, big);
        assert_eq!(inp.regime, Regime::LargeGap);
        let (_, half_gap) = inputs(None, big / 2.0);
        let ratio = n_maxmin(&inp, &half_gap).unwrap() / n_maxmin(&inp, &gap).unwrap();
        assert!((ratio - 16.0).abs() <= 16.0 * 1e-9);

        let a = n_sr(&inp, &gap, 0.3, 0.2).unwrap();
        let b = n_sr(&inp, &gap, 0.3, 0.1).unwrap();
        assert!((b.epsilon_term / a.epsilon_term - 4.0).abs() <= 4.0 * 1e-9);
        assert_eq!(a.n_sr, a.n_maxmin.max(a.epsilon_term));

        let (small, small_gap) = inputs(None, 0.1);
        assert_eq!(small.regime, Regime::SmallGap);
        let n = n_maxmin(&small, &small_gap).unwrap();
        let w = lambert_w_minus1(-0.1 / (2.0 * c)).unwrap();
        assert!((n - 5.0 * (-4.0 * w).exp()).abs() <= 1e-9 * n);
        let doubled = n_maxmin(&small.clone().with_multiplier(2.0), &small_gap).unwrap();
        assert!((doubled / n - 2.0).abs() < 1e-12);
        let zero = GapProfile { delta_min: 0.0, ..small_gap };
        assert!(n_maxmin(&small, &zero).is_err());
    }

    #[test]
    fn regime_boundary_reports_both_formulas() {
        let c = entropy_modulus_constant(6);
        let edge = 2.0 / std::f64::consts::E * c;
        let (large, gap) = inputs(Some(Regime::LargeGap), edge);
        let (small, _) = inputs(Some(Regime::SmallGap), edge);
        let a = n_maxmin(&large, &gap).unwrap();
        let b = n_maxmin(&small, &gap).unwrap();
        assert!(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0);
    }

    fn scalar_world(values: &[f64], b: f64) -> World {
        let cfg = WorldConfig {
            num_prompts: 1,
            num_responses: values.len(),
            feature_dim: 1,
            shared_dim: 1,
            num_groups: 1,
            l_max: 1.0,
            b_max: b,
            group_proportions: vec![1.0],
            rng_seed: 0,
        };
        let mut world = build_world(&cfg).unwrap();
        let rows: Vec<Vec<f64>> = values.iter().map(|v| vec![*v]).collect();
        world.features = FeatureMap::from_rows(1, values.len(), &rows, 1.0).unwrap();
        world.truth = GroundTruth::new(DMatrix::from_element(1, 1, b), DMatrix::from_element(1, 1, 1.0), PolicyTable::uniform(1, values.len()));
        world
    }

    #[test]
    fn psi_hand_case_and_scaling() {
        let world = scalar_world(&[0.5, -0.5], 2.0);
        let metric = InverseMetric::new(&DMatrix::from_element(1, 1, 3.0), 1.0).unwrap();
        let s = spec();
        let psi = psi_u(&world, &metric, &s, 1.0, 0).unwrap();
        // Each |φ| is 0.5 and the metric is 4, so every weighted norm is 0.25.
        let expect = (s.c_delta + 4.0) * 0.25 * 0.25;
        assert!((psi - expect).abs() <= 1e-10 * expect);
        let psi2 = psi_u(&world, &metric, &s, 2.0, 0).unwrap();
        assert!((psi2 * 4.0 - psi).abs() <= 1e-12 * psi);
        let flat = scalar_world(&[0.0, 0.0], 2.0);
        assert_eq!(psi_u(&flat, &metric, &s, 1.0, 0).unwrap(), 0.0);
    }

    #[test]
    fn kl_check_is_zero_at_truth_and_bound_scales() {
        let world = build_world(&WorldConfig::default()).unwrap();
        let ds = sample_dataset(&world, 1024, &[0.8, 0.2], &SamplingOptions::default(), 0).unwrap();
        let n = ds.len();
        let stats = compute_covariances(&ds, 1.0 / n as f64);
        let metric = stats.pooled_metric().unwrap();
        let s = spec().with_lambda(stats.lambda);
        let check = kl_gibbs_bound_check(&world, &world.truth.theta(0), &metric, &s, n, 1.0, 0).unwrap();
        assert_eq!(check.measured_kl, 0.0);
        assert!(check.bound_leading_term >= 0.0);
        let a = s.with_lambda(0.0).eta_sr(1024).unwrap();
        let b = s.with_lambda(0.0).eta_sr(4096).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn misidentification_guard() {
        // If every fitted entropy is within Δ_min/2 of its true value, the
        // entropy rule applied to fitted policies still finds u★.
        let rho = PromptDistribution::uniform(1);
        let truth = vec![
            PolicyTable::from_rows(&[vec![0.7, 0.2, 0.1]]).unwrap(),
            PolicyTable::uniform(1, 3),
            PolicyTable::from_rows(&[vec![0.9, 0.05, 0.05]]).unwrap(),
        ];
        let profile = gap_profile(&truth, &rho).unwrap();
        let fitted = vec![
            PolicyTable::from_rows(&[vec![0.6, 0.25, 0.15]]).unwrap(),
            PolicyTable::from_rows(&[vec![0.4, 0.35, 0.25]]).unwrap(),
            PolicyTable::from_rows(&[vec![0.85, 0.1, 0.05]]).unwrap(),
        ];
        for (t, f) in truth.iter().zip(&fitted) {
            assert!((conditional_entropy(t, &rho) - conditional_entropy(f, &rho)).abs() < profile.delta_min / 2.0);
        }
        let chosen = crate::policy::worst_group_by_entropy(&fitted, &rho).unwrap().chosen;
        assert_eq!(chosen, profile.u_star);
    }
}
