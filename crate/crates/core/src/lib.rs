//! A tabular laboratory for group-fair reward learning from pairwise
//! preferences.
//!
//! The crate builds finite synthetic worlds (prompts, responses, a feature
//! table and a low-rank ground truth shared across annotator groups), samples
//! Bradley–Terry preference data from them, fits two reward estimators
//! (a shared low-rank representation and independent per-group models),
//! turns the estimates into max-min fair KL-regularized policies, and
//! evaluates the closed-form sample-complexity quantities attached to the
//! procedure. A seeded harness ties everything together into reproducible
//! Monte-Carlo sweeps.
//!
//! Module map:
//!
//! - [`world`]: synthetic worlds and reward evaluation.
//! - [`data`]: preference sampling and covariance statistics.
//! - [`estimation`]: maximum-likelihood fitting and confidence widths.
//! - [`policy`]: Gibbs policies, pessimism, the max-min solver, group selection.
//! - [`complexity`]: entropy inequalities, Lambert W, sample-complexity formulas.
//! - [`harness`]: scenarios, trials, sweeps and result persistence.

pub mod complexity;
pub mod data;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod io;
pub mod policy;
pub mod rng;
pub mod world;

pub use error::{Error, Result};
