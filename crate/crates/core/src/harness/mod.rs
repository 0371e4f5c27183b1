//! Seeded end-to-end experiments and their persistence.
//!
//! A trial builds a world, samples preferences, fits both estimators, solves
//! the max-min policies they induce (plus a skyline on the true rewards) and
//! records per-group metrics. A sweep runs every `(n, minority, seed)` cell
//! of a scenario and writes CSV tables, plotting curves and a manifest.

mod sweep;
mod trial;
mod xi;

use serde::{Deserialize, Serialize};

pub use sweep::{emit, manifest_path, median, sweep, FileEntry, Manifest, SweepOutcome, RESULTS_HEADER};
pub use trial::{run_trial, ComparisonBound, GroupMetrics, MethodResult, TrialResult, AGREEMENT_GAP};
pub use xi::{estimate_xi_inf, xi_draws};

use crate::data::SamplingOptions;
use crate::estimation::FitOptions;
use crate::policy::SolverOptions;
use crate::world::WorldConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Shared low-rank estimate with pooled confidence width.
    Sharedrep,
    /// Independent per-group estimates.
    Maxmin,
    /// True rewards, no pessimism.
    Gold,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sharedrep => "sharedrep",
            Method::Maxmin => "maxmin",
            Method::Gold => "gold",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum LambdaRule {
    Fixed(f64),
    OneOverN,
}

impl LambdaRule {
    pub fn lambda(self, n: usize) -> f64 {
        match self {
            LambdaRule::Fixed(v) => v,
            LambdaRule::OneOverN => 1.0 / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Base world; each trial offsets its seed by the trial seed unless
    /// `fixed_world` is set.
    pub world: WorldConfig,
    pub fixed_world: bool,
    pub n_grid: Vec<usize>,
    pub minority_grid: Vec<f64>,
    /// Group that receives the minority share; the rest split the remainder
    /// evenly. Defaults to the last group.
    pub minority_group: Option<usize>,
    pub beta: f64,
    pub lambda_rule: LambdaRule,
    pub delta: f64,
    pub c_sr: f64,
    pub c_mm: f64,
    /// Subtract the confidence-width penalty in the shared-representation
    /// policy objective.
    pub pessimism: bool,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub sampling: SamplingOptions,
    pub fit: FitOptions,
    pub solver: SolverOptions,
    /// Draws for the reward-gap estimate used by the per-group policy
    /// comparison bound; zero skips the bound.
    pub xi_samples: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            fixed_world: false,
            n_grid: vec![256, 1024, 4096],
            minority_grid: vec![0.05, 0.2],
            minority_group: None,
            beta: 1.0,
            lambda_rule: LambdaRule::OneOverN,
            delta: 0.1,
            c_sr: 1.0,
            c_mm: 1.0,
            pessimism: true,
            seeds: (0..4).collect(),
            methods: vec![Method::Sharedrep, Method::Maxmin, Method::Gold],
            sampling: SamplingOptions::default(),
            fit: FitOptions::default(),
            solver: SolverOptions::default(),
            xi_samples: 0,
        }
    }
}

impl ScenarioConfig {
    /// Default world with a wider parameter ball (`b_max = 4`), swept over
    /// `N = 2⁸ … 2¹⁴` with 20 seeds for the error-versus-sample-size curve.
    pub fn concentration() -> Self {
        Self {
            world: WorldConfig {
                b_max: 4.0,
                ..WorldConfig::default()
            },
            n_grid: (8..=14).map(|e| 1usize << e).collect(),
            minority_grid: vec![0.2],
            seeds: (0..20).collect(),
            ..Self::default()
        }
    }

    /// Eight groups sharing a rank-3 representation of 16 features, one of
    /// them a minority whose share sweeps `{0.01, 0.05, 0.1, 0.2}` at
    /// `N = 4096`, over 50 seeds.
    pub fn minority_trend() -> Self {
        let groups = 8;
        Self {
            world: WorldConfig {
                num_groups: groups,
                group_proportions: vec![1.0 / groups as f64; groups],
                ..WorldConfig::default()
            },
            n_grid: vec![4096],
            minority_grid: vec![0.01, 0.05, 0.1, 0.2],
            seeds: (0..50).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::config("n_grid", "must be nonempty with positive sizes"));
        }
        if self.minority_grid.is_empty() || self.minority_grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("minority_grid", "must be nonempty with entries in [0, 1]"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("beta", "must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        if let LambdaRule::Fixed(v) = self.lambda_rule {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config("lambda_rule", "a fixed ridge must be positive"));
            }
        }
        if self.minority_group().is_none_or(|m| m >= self.world.num_groups) {
            return Err(Error::config("minority_group", "must name an existing group"));
        }
        Ok(())
    }

    pub fn minority_group(&self) -> Option<usize> {
        self.minority_group.or_else(|| self.world.num_groups.checked_sub(1))
    }

    /// Group proportions with `minority` at the configured minority group.
    pub fn proportions(&self, minority: f64) -> Vec<f64> {
        self.proportions_for(minority, self.minority_group().unwrap_or(0))
    }

    /// Group proportions with share `minority` at group `m`; the other
    /// groups split the remainder evenly.
    pub fn proportions_for(&self, minority: f64, m: usize) -> Vec<f64> {
        let groups = self.world.num_groups;
        if groups == 1 {
            return vec![1.0];
        }
        let rest = (1.0 - minority) / (groups - 1) as f64;
        let mut p: Vec<f64> = (0..groups).map(|u| if u == m { minority } else { rest }).collect();
        // Put the rounding residue on the first majority group so the sum is 1.
        let first_majority = if m == 0 { 1 } else { 0 };
        let residue = 1.0 - p.iter().sum::<f64>();
        p[first_majority] += residue;
        p
    }

    pub fn world_for_seed(&self, seed: u64) -> WorldConfig {
        let mut w = self.world.clone();
        if !self.fixed_world {
            w.rng_seed = self.world.rng_seed.wrapping_add(seed);
        }
        w
    }

    /// Trial grid in emission order: n outermost, then minority, then seed.
    pub fn grid(&self) -> Vec<(usize, f64, u64)> {
        let mut cells = Vec::new();
        for &n in &self.n_grid {
            for &p in &self.minority_grid {
                for &s in &self.seeds {
                    cells.push((n, p, s));
                }
            }
        }
        cells
    }
}
