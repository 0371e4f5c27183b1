//! Bradley–Terry preference data and the difference-feature covariances
//! consumed by both estimators.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::RewardTable;
use crate::rng::{stream_rng, Stream};
use crate::world::{validate_proportions, FeatureMap, World};
use crate::{Error, Result};

/// `σ(r1 − r2)`, evaluated without overflow for any finite inputs.
pub fn bt_preference_prob(r1: f64, r2: f64) -> f64 {
    sigmoid(r1 - r2)
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(t)`, accurate in both tails.
pub fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt: usize,
    pub first: usize,
    pub second: usize,
    /// 1 when `first` was preferred.
    pub label: u8,
    pub group: usize,
}

/// Records plus cached difference features `δ_i = φ(x_i, y_i) − φ(x_i, y′_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    records: Vec<PreferenceRecord>,
    n_per_group: Vec<usize>,
    dim: usize,
    diffs: Vec<f64>,
}

impl PreferenceDataset {
    pub fn from_records(records: Vec<PreferenceRecord>, phi: &FeatureMap, num_groups: usize) -> Result<Self> {
        let mut n_per_group = vec![0usize; num_groups];
        let dim = phi.dim();
        let mut diffs = Vec::with_capacity(records.len() * dim);
        for (i, r) in records.iter().enumerate() {
            if r.prompt >= phi.num_prompts() || r.first >= phi.num_responses() || r.second >= phi.num_responses() {
                return Err(Error::arg(format!("record {i} indexes outside the world")));
            }
            if r.first == r.second {
                return Err(Error::arg(format!("record {i} compares a response with itself")));
            }
            if r.label > 1 {
                return Err(Error::arg(format!("record {i} has label {}", r.label)));
            }
            if r.group >= num_groups {
                return Err(Error::arg(format!("record {i} names group {} of {num_groups}", r.group)));
            }
            n_per_group[r.group] += 1;
            let a = phi.phi(r.prompt, r.first);
            let b = phi.phi(r.prompt, r.second);
            diffs.extend(a.iter().zip(b).map(|(p, q)| p - q));
        }
        Ok(Self {
            records,
            n_per_group,
            dim,
            diffs,
        })
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_groups(&self) -> usize {
        self.n_per_group.len()
    }

    pub fn n_per_group(&self) -> &[usize] {
        &self.n_per_group
    }

    pub fn group_is_empty(&self, u: usize) -> bool {
        self.n_per_group[u] == 0
    }

    pub fn empty_groups(&self) -> Vec<usize> {
        (0..self.num_groups()).filter(|&u| self.group_is_empty(u)).collect()
    }

    pub fn diff(&self, i: usize) -> &[f64] {
        &self.diffs[i * self.dim..(i + 1) * self.dim]
    }

    /// Records of group `u` only, keeping the group index.
    pub fn restrict_to_group(&self, u: usize) -> Self {
        let mut records = Vec::with_capacity(self.n_per_group[u]);
        let mut diffs = Vec::with_capacity(self.n_per_group[u] * self.dim);
        for (i, r) in self.records.iter().enumerate() {
            if r.group == u {
                records.push(*r);
                diffs.extend_from_slice(self.diff(i));
            }
        }
        let mut n_per_group = vec![0; self.num_groups()];
        n_per_group[u] = records.len();
        Self {
            records,
            n_per_group,
            dim: self.dim,
            diffs,
        }
    }

    /// Concatenates two datasets over the same world.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim || self.num_groups() != other.num_groups() {
            return Err(Error::arg("datasets describe different worlds"));
        }
        let mut out = self.clone();
        out.records.extend_from_slice(&other.records);
        out.diffs.extend_from_slice(&other.diffs);
        for (a, b) in out.n_per_group.iter_mut().zip(&other.n_per_group) {
            *a += b;
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, phi: &FeatureMap, num_groups: usize) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let records = rd.deserialize().collect::<std::result::Result<Vec<PreferenceRecord>, _>>()?;
        Self::from_records(records, phi, num_groups)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSampling {
    #[default]
    FromRho,
    Uniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    #[default]
    UniformWithoutReplacement,
    FromRefPolicy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAssignment {
    /// Each record's group is an independent draw from the proportions.
    #[default]
    Iid,
    /// Group sizes are the largest-remainder rounding of `N·p`, in shuffled order.
    FixedQuota,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingOptions {
    pub prompt_sampling: PromptSampling,
    pub pair_sampling: PairSampling,
    pub group_assignment: GroupAssignment,
}

/// Draws `n_total` labelled comparisons from the world's ground truth.
pub fn sample_dataset(
    world: &World,
    n_total: usize,
    proportions: &[f64],
    opts: &SamplingOptions,
    seed: u64,
) -> Result<PreferenceDataset> {
    if n_total == 0 {
        return Err(Error::arg("dataset size must be at least 1"));
    }
    let num_groups = world.num_groups();
    validate_proportions(proportions, num_groups)?;
    let (nx, ny) = (world.features.num_prompts(), world.features.num_responses());
    if ny < 2 {
        return Err(Error::arg("pairwise comparisons need at least two responses"));
    }
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let tables: Vec<RewardTable> = world.reward_tables();

    let groups: Vec<usize> = match opts.group_assignment {
        GroupAssignment::Iid => {
            let law = WeightedIndex::new(proportions).map_err(|e| Error::arg(e.to_string()))?;
            (0..n_total).map(|_| law.sample(&mut rng)).collect()
        }
        GroupAssignment::FixedQuota => {
            let quotas = largest_remainder(proportions, n_total);
            let mut g: Vec<usize> = quotas.iter().enumerate().flat_map(|(u, &c)| std::iter::repeat_n(u, c)).collect();
            g.shuffle(&mut rng);
            g
        }
    };
    let prompt_law = match opts.prompt_sampling {
        PromptSampling::FromRho => Some(WeightedIndex::new(world.prompts.rho()).map_err(|e| Error::arg(e.to_string()))?),
        PromptSampling::Uniform => None,
    };
    let ref_laws: Vec<WeightedIndex<f64>> = match opts.pair_sampling {
        PairSampling::UniformWithoutReplacement => Vec::new(),
        PairSampling::FromRefPolicy => world
            .truth
            .ref_policy
            .rows()
            .map(|row| WeightedIndex::new(row).map_err(|e| Error::arg(e.to_string())))
            .collect::<Result<_>>()?,
    };

    let mut records = Vec::with_capacity(n_total);
    for group in groups {
        let prompt = match &prompt_law {
            Some(law) => law.sample(&mut rng),
            None => rng.random_range(0..nx),
        };
        let (first, second) = match opts.pair_sampling {
            PairSampling::UniformWithoutReplacement => {
                let a = rng.random_range(0..ny);
                let mut b = rng.random_range(0..ny - 1);
                if b >= a {
                    b += 1;
                }
                (a, b)
            }
            PairSampling::FromRefPolicy => {
                let law = &ref_laws[prompt];
                let a = law.sample(&mut rng);
                let mut b = law.sample(&mut rng);
                while b == a {
                    b = law.sample(&mut rng);
                }
                (a, b)
            }
        };
        let table = &tables[group];
        let p = bt_preference_prob(table.get(prompt, first), table.get(prompt, second));
        let label = u8::from(rng.random::<f64>() < p);
        records.push(PreferenceRecord {
            prompt,
            first,
            second,
            label,
            group,
        });
    }
    PreferenceDataset::from_records(records, &world.features, num_groups)
}

fn largest_remainder(proportions: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for &u in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[u] += 1;
        left -= 1;
    }
    counts
}

/// Pooled and per-group second moments of the difference features.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceStats {
    pub sigma: DMatrix<f64>,
    pub sigma_per_group: Vec<DMatrix<f64>>,
    pub lambda: f64,
    /// Groups without records; their `Σ_u` is the zero matrix.
    pub empty_groups: Vec<usize>,
}

/// `Σ = (1/N) Σ_i δ_i δ_iᵀ` and `Σ_u` over each group's records.
pub fn compute_covariances(dataset: &PreferenceDataset, lambda: f64) -> CovarianceStats {
    let d = dataset.dim();
    let num_groups = dataset.num_groups();
    let mut sums = vec![DMatrix::<f64>::zeros(d, d); num_groups];
    for (i, r) in dataset.records().iter().enumerate() {
        let delta = dataset.diff(i);
        let acc = &mut sums[r.group];
        for col in 0..d {
            let dc = delta[col];
            if dc == 0.0 {
                continue;
            }
            for row in 0..d {
                acc[(row, col)] += delta[row] * dc;
            }
        }
    }
    let mut sigma = DMatrix::<f64>::zeros(d, d);
    for s in &sums {
        sigma += s;
    }
    if !dataset.is_empty() {
        sigma /= dataset.len() as f64;
    }
    let sigma_per_group = sums
        .into_iter()
        .zip(dataset.n_per_group())
        .map(|(s, &n)| if n == 0 { s } else { s / n as f64 })
        .collect();
    let empty_groups = dataset.empty_groups();
    if !empty_groups.is_empty() {
        log::warn!("groups {empty_groups:?} have no records; their covariance is zero");
    }
    CovarianceStats {
        sigma,
        sigma_per_group,
        lambda,
        empty_groups,
    }
}

impl CovarianceStats {
    /// Factorized `Σ + λI`.
    pub fn pooled_metric(&self) -> Result<InverseMetric> {
        InverseMetric::new(&self.sigma, self.lambda)
    }

    /// Factorized `Σ_u + λI`.
    pub fn group_metric(&self, u: usize) -> Result<InverseMetric> {
        InverseMetric::new(&self.sigma_per_group[u], self.lambda)
    }
}

/// Cholesky factorization of `M + λI`, used for both weighted norms.
#[derive(Clone, Debug)]
pub struct InverseMetric {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl InverseMetric {
    pub fn new(m: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::arg("metric must be square"));
        }
        let mut matrix = m.clone();
        for i in 0..matrix.nrows() {
            matrix[(i, i)] += lambda;
        }
        let chol = Cholesky::new(matrix.clone()).ok_or(Error::NotPositiveDefinite { lambda })?;
        Ok(Self { matrix, chol })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `M + λI`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `(M + λI)⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        self.chol.solve(&DVector::from_column_slice(v)).iter().copied().collect()
    }

    /// `L⁻¹ v` for the lower Cholesky factor `L`, so that `‖L⁻¹v‖ = ‖v‖_{(M+λI)⁻¹}`.
    pub fn whiten(&self, v: &[f64]) -> Vec<f64> {
        let mut out = DVector::from_column_slice(v);
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out.iter().copied().collect()
    }

    pub fn norm(&self, v: &[f64]) -> f64 {
        let mv = &self.matrix * DVector::from_column_slice(v);
        crate::world::dot(v, mv.as_slice()).max(0.0).sqrt()
    }

    pub fn inv_norm(&self, v: &[f64]) -> f64 {
        let w = self.whiten(v);
        crate::world::dot(&w, &w).sqrt()
    }
}

/// `sqrt(vᵀ (M + λI) v)`.
pub fn weighted_norm(v: &[f64], m: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    if m.nrows() != v.len() || !m.is_square() {
        return Err(Error::arg("vector and matrix dimensions differ"));
    }
    let mut mv = m * DVector::from_column_slice(v);
    mv.axpy(lambda, &DVector::from_column_slice(v), 1.0);
    Ok(crate::world::dot(v, mv.as_slice()).max(0.0).sqrt())
}

/// `sqrt(vᵀ (M + λI)⁻¹ v)` via a Cholesky solve.
pub fn weighted_inv_norm(v: &[f64], m: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    if m.nrows() != v.len() {
        return Err(Error::arg("vector and matrix dimensions differ"));
    }
    Ok(InverseMetric::new(m, lambda)?.inv_norm(v))
}
