//! Everything downstream of reward estimates: Gibbs policies, regularized
//! and unregularized values, pessimistic values and best responses, the
//! max-min policy solver, worst-group selection and suboptimality.

mod gibbs;
mod pessimism;
mod selection;
mod solver;
mod subopt;
mod table;

pub use gibbs::{conditional_entropy, expected_kl, gibbs_policy, kl_value, row_entropy, unregularized_value, KlValue};
pub use pessimism::{pessimistic_best_response, pessimistic_value, PessimisticValueResult};
pub use selection::{worst_group_by_entropy, worst_group_by_reward, GroupSelection, TIE_TOL};
pub use solver::{solve_maxmin_policy, MaxMinProblem, MaxMinSolution, SolverOptions, UncertaintyPenalty};
pub use subopt::{optimal_value, suboptimality, suboptimality_table, theorem1_rhs, ComparisonRhs};
pub use table::{PolicyTable, RewardTable, ROW_SUM_TOL};

pub(crate) use table::argmax_first;
