//! Worst-group identification by expected reward and by Gibbs entropy.

use serde::{Deserialize, Serialize};

use crate::world::PromptDistribution;
use crate::{Error, Result};

use super::gibbs::{conditional_entropy, unregularized_value};
use super::{PolicyTable, RewardTable};

/// Scores within this distance of the extremum count as tied.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSelection {
    pub chosen: usize,
    pub scores: Vec<f64>,
    pub tie: bool,
}

impl GroupSelection {
    fn pick(scores: Vec<f64>, better: impl Fn(f64, f64) -> bool) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::arg("group selection needs at least one group"));
        }
        let mut chosen = 0;
        for (u, &s) in scores.iter().enumerate().skip(1) {
            if better(s, scores[chosen]) {
                chosen = u;
            }
        }
        let tie = scores
            .iter()
            .enumerate()
            .any(|(u, s)| u != chosen && (s - scores[chosen]).abs() <= TIE_TOL);
        Ok(Self { chosen, scores, tie })
    }
}

/// The group with the smallest expected reward `E_{x∼ρ, y∼π} r_u` under `π`.
pub fn worst_group_by_reward(policy: &PolicyTable, rewards: &[RewardTable], rho: &PromptDistribution) -> Result<GroupSelection> {
    let scores = rewards.iter().map(|r| unregularized_value(policy, r, rho)).collect();
    GroupSelection::pick(scores, |a, b| a < b)
}

/// The group whose Gibbs policy has the largest conditional entropy.
pub fn worst_group_by_entropy(gibbs: &[PolicyTable], rho: &PromptDistribution) -> Result<GroupSelection> {
    let scores = gibbs.iter().map(|p| conditional_entropy(p, rho)).collect();
    GroupSelection::pick(scores, |a, b| a > b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{gibbs_policy, solve_maxmin_policy, MaxMinProblem, SolverOptions};

    #[test]
    fn single_group_is_chosen() {
        let rho = PromptDistribution::uniform(2);
        let r = [RewardTable::from_fn(2, 3, |x, y| (x + y) as f64)];
        let p = PolicyTable::uniform(2, 3);
        let by_reward = worst_group_by_reward(&p, &r, &rho).unwrap();
        let by_entropy = worst_group_by_entropy(&[gibbs_policy(&r[0], &p, 1.0).unwrap()], &rho).unwrap();
        assert_eq!((by_reward.chosen, by_reward.tie), (0, false));
        assert_eq!((by_entropy.chosen, by_entropy.tie), (0, false));
    }

    #[test]
    fn identical_tables_tie_to_zero() {
        let rho = PromptDistribution::uniform(2);
        let r = RewardTable::from_fn(2, 3, |x, y| 0.3 * x as f64 - 0.2 * y as f64);
        let tables = [r.clone(), r.clone(), r];
        let p = PolicyTable::uniform(2, 3);
        let by_reward = worst_group_by_reward(&p, &tables, &rho).unwrap();
        assert_eq!((by_reward.chosen, by_reward.tie), (0, true));
        let g: Vec<PolicyTable> = tables.iter().map(|t| gibbs_policy(t, &p, 1.0).unwrap()).collect();
        let by_entropy = worst_group_by_entropy(&g, &rho).unwrap();
        assert_eq!((by_entropy.chosen, by_entropy.tie), (0, true));
    }

    /// The two rules can disagree: with one prompt and a uniform reference,
    /// a group with a constant reward table has the flattest Gibbs policy,
    /// yet a large constant makes it the best-off group under any policy.
    #[test]
    fn rules_differ_when_one_group_has_a_large_constant_reward() {
        let rho = PromptDistribution::uniform(1);
        let reference = PolicyTable::uniform(1, 2);
        let tables = [
            RewardTable::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            RewardTable::from_rows(&[vec![5.0, 5.0]]).unwrap(),
        ];
        let sol = solve_maxmin_policy(
            MaxMinProblem {
                rewards: &tables,
                reference: &reference,
                rho: &rho,
                beta: 1.0,
                penalty: None,
            },
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(sol.duality_gap <= 1e-6);
        let by_reward = worst_group_by_reward(&sol.policy, &tables, &rho).unwrap();
        let gibbs: Vec<PolicyTable> = tables.iter().map(|t| gibbs_policy(t, &reference, 1.0).unwrap()).collect();
        let by_entropy = worst_group_by_entropy(&gibbs, &rho).unwrap();
        assert_eq!(by_reward.chosen, 0);
        assert_eq!(by_entropy.chosen, 1);
        assert!(!by_reward.tie && !by_entropy.tie);
    }

    #[test]
    fn entropy_rule_ignores_per_prompt_shifts_and_reward_rule_does_not() {
        let rho = PromptDistribution::new(vec![0.3, 0.7]).unwrap();
        let reference = PolicyTable::uniform(2, 3);
        let base = [
            RewardTable::from_fn(2, 3, |x, y| 0.4 * y as f64 - 0.1 * x as f64),
            RewardTable::from_fn(2, 3, |x, y| 0.9 * ((x + y) % 3) as f64),
        ];
        let shifted = [base[0].shifted_per_prompt(&[3.0, 3.0]), base[1].clone()];
        let gibbs = |t: &[RewardTable]| -> Vec<PolicyTable> { t.iter().map(|r| gibbs_policy(r, &reference, 1.0).unwrap()).collect() };
        let e0 = worst_group_by_entropy(&gibbs(&base), &rho).unwrap();
        let e1 = worst_group_by_entropy(&gibbs(&shifted), &rho).unwrap();
        assert_eq!(e0.chosen, e1.chosen);
        for (a, b) in e0.scores.iter().zip(&e1.scores) {
            assert!((a - b).abs() < 1e-12);
        }
        let r0 = worst_group_by_reward(&reference, &base, &rho).unwrap();
        let r1 = worst_group_by_reward(&reference, &shifted, &rho).unwrap();
        assert!((r1.scores[0] - r0.scores[0] - 3.0).abs() < 1e-12);
    }
}
