//! Finite synthetic worlds.
//!
//! A world is a prompt set `X`, a response set `Y`, an explicit feature table
//! `φ(x, y) ∈ R^d`, a prompt distribution `ρ` and a ground truth in which every
//! group's reward parameter is a convex mixture of the columns of a shared
//! `d × K` matrix: `θ★_u = B★ w★_u`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::policy::PolicyTable;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// Floor applied to every prompt probability before renormalization.
pub const RHO_FLOOR: f64 = 1e-3;

const PROPORTION_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_prompts: usize,
    pub num_responses: usize,
    pub feature_dim: usize,
    pub shared_dim: usize,
    pub num_groups: usize,
    pub l_max: f64,
    pub b_max: f64,
    pub group_proportions: Vec<f64>,
    pub rng_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_prompts: 8,
            num_responses: 6,
            feature_dim: 16,
            shared_dim: 3,
            num_groups: 2,
            l_max: 1.0,
            b_max: 2.0,
            group_proportions: vec![0.8, 0.2],
            rng_seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("num_prompts", self.num_prompts),
            ("num_responses", self.num_responses),
            ("feature_dim", self.feature_dim),
            ("shared_dim", self.shared_dim),
            ("num_groups", self.num_groups),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.shared_dim > self.feature_dim {
            return Err(Error::config(
                "shared_dim",
                format!("K = {} exceeds d = {}", self.shared_dim, self.feature_dim),
            ));
        }
        if !(self.l_max.is_finite() && self.l_max > 0.0) {
            return Err(Error::config("l_max", "must be a positive real"));
        }
        if !(self.b_max.is_finite() && self.b_max > 0.0) {
            return Err(Error::config("b_max", "must be a positive real"));
        }
        validate_proportions(&self.group_proportions, self.num_groups)
    }
}

pub(crate) fn validate_proportions(p: &[f64], num_groups: usize) -> Result<()> {
    if p.len() != num_groups {
        return Err(Error::config(
            "group_proportions",
            format!("expected {num_groups} entries, got {}", p.len()),
        ));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::config("group_proportions", "entries must be nonnegative"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROPORTION_TOL {
        return Err(Error::config("group_proportions", format!("entries sum to {s}, not 1")));
    }
    Ok(())
}

/// Explicit embedding table `φ(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    num_prompts: usize,
    num_responses: usize,
    dim: usize,
    data: Vec<f64>,
    l_max: f64,
}

impl FeatureMap {
    /// `rows[x * |Y| + y]` holds `φ(x, y)`.
    pub fn from_rows(num_prompts: usize, num_responses: usize, rows: &[Vec<f64>], l_max: f64) -> Result<Self> {
        if rows.len() != num_prompts * num_responses || num_prompts == 0 || num_responses == 0 {
            return Err(Error::arg("feature table shape does not match |X|·|Y|"));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::arg("feature rows must share a positive dimension"));
        }
        let map = Self {
            num_prompts,
            num_responses,
            dim,
            data: rows.concat(),
            l_max,
        };
        map.check_norm_bound()?;
        Ok(map)
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn l_max(&self) -> f64 {
        self.l_max
    }

    pub fn phi(&self, x: usize, y: usize) -> &[f64] {
        let start = (x * self.num_responses + y) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub(crate) fn same_shape(&self, num_prompts: usize, num_responses: usize) -> bool {
        self.num_prompts == num_prompts && self.num_responses == num_responses
    }

    pub fn max_norm(&self) -> f64 {
        self.data.chunks(self.dim).map(norm).fold(0.0, f64::max)
    }

    /// Scans every entry against `l_max` (with a relative slack of 1e-12).
    pub fn check_norm_bound(&self) -> Result<()> {
        let m = self.max_norm();
        if m > self.l_max * (1.0 + 1e-12) {
            return Err(Error::arg(format!("feature norm {m} exceeds l_max = {}", self.l_max)));
        }
        Ok(())
    }

    /// `E_{y∼π(·|x)} φ(x, y)`.
    pub fn expected_at(&self, x: usize, probs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (y, &p) in probs.iter().enumerate() {
            if p != 0.0 {
                axpy(p, self.phi(x, y), &mut out);
            }
        }
        out
    }

    /// `E_{x∼ρ, y∼π(·|x)} φ(x, y)`.
    pub fn expected(&self, policy: &PolicyTable, rho: &PromptDistribution) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for x in 0..self.num_prompts {
            let m = self.expected_at(x, policy.row(x));
            axpy(rho.rho()[x], &m, &mut out);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptDistribution {
    rho: Vec<f64>,
    rho_min: f64,
}

impl PromptDistribution {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        if rho.is_empty() || rho.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::arg("prompt distribution entries must be nonnegative"));
        }
        let s: f64 = rho.iter().sum();
        if (s - 1.0).abs() > PROPORTION_TOL {
            return Err(Error::arg(format!("prompt distribution sums to {s}")));
        }
        let rho_min = rho.iter().copied().fold(f64::INFINITY, f64::min);
        if rho_min <= 0.0 {
            return Err(Error::arg("prompt distribution must have full support"));
        }
        Ok(Self { rho, rho_min })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            rho: vec![1.0 / n as f64; n],
            rho_min: 1.0 / n as f64,
        }
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn rho_min(&self) -> f64 {
        self.rho_min
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `d × K`, every column of norm at most `b_max`.
    pub b_star: DMatrix<f64>,
    /// `K × U`, every column on the simplex.
    pub w_star: DMatrix<f64>,
    /// `d × U`, cached `B★ w★`.
    pub theta_star: DMatrix<f64>,
    pub ref_policy: PolicyTable,
}

impl GroundTruth {
    pub fn new(b_star: DMatrix<f64>, w_star: DMatrix<f64>, ref_policy: PolicyTable) -> Self {
        let theta_star = &b_star * &w_star;
        Self {
            b_star,
            w_star,
            theta_star,
            ref_policy,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.w_star.ncols()
    }

    pub fn theta(&self, u: usize) -> Vec<f64> {
        self.theta_star.column(u).iter().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub features: FeatureMap,
    pub prompts: PromptDistribution,
    pub truth: GroundTruth,
}

/// Builds a world from its configuration. Pure in `config`.
pub fn build_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = stream_rng(config.rng_seed, Stream::World, 0);
    let (nx, ny, d, k, u) = (
        config.num_prompts,
        config.num_responses,
        config.feature_dim,
        config.shared_dim,
        config.num_groups,
    );

    let mut raw: Vec<f64> = (0..nx * ny * d).map(|_| rng.sample(StandardNormal)).collect();
    let max_norm = raw.chunks(d).map(norm).fold(0.0, f64::max);
    if max_norm > 0.0 {
        let scale = config.l_max / max_norm;
        raw.iter_mut().for_each(|v| *v *= scale);
    }
    let features = FeatureMap {
        num_prompts: nx,
        num_responses: ny,
        dim: d,
        data: raw,
        l_max: config.l_max,
    };

    let mut b_star = DMatrix::<f64>::from_fn(d, k, |_, _| rng.sample(StandardNormal));
    for mut col in b_star.column_iter_mut() {
        let n = col.norm();
        col *= config.b_max / n;
    }

    let mut w_star = DMatrix::<f64>::zeros(k, u);
    for g in 0..u {
        let w = uniform_simplex(&mut rng, k);
        w_star.column_mut(g).copy_from_slice(&w);
    }

    let rho = floored_dirichlet(&mut rng, nx, RHO_FLOOR);
    let prompts = PromptDistribution::new(rho)?;
    let ref_policy = PolicyTable::uniform(nx, ny);

    Ok(World {
        config: config.clone(),
        features,
        prompts,
        truth: GroundTruth::new(b_star, w_star, ref_policy),
    })
}

/// Uniform draw from the `(k-1)`-simplex via sorted uniform spacings.
pub fn uniform_simplex<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut cuts: Vec<f64> = (0..k.saturating_sub(1)).map(|_| rng.random::<f64>()).collect();
    cuts.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(k);
    let mut prev = 0.0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(1.0 - prev);
    out
}

fn floored_dirichlet<R: Rng + ?Sized>(rng: &mut R, n: usize, floor: f64) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let floored: Vec<f64> = draws.iter().map(|v| (v / total).max(floor)).collect();
    let s: f64 = floored.iter().sum();
    let mut rho: Vec<f64> = floored.iter().map(|v| v / s).collect();
    // Absorb the last rounding ulp so the sum is 1 to machine precision.
    let resid = 1.0 - rho.iter().sum::<f64>();
    let imax = crate::policy::argmax_first(&rho);
    rho[imax] += resid;
    rho
}

impl World {
    pub fn num_groups(&self) -> usize {
        self.truth.num_groups()
    }

    /// True reward table `r_{θ★_u}`.
    pub fn reward_table(&self, u: usize) -> crate::policy::RewardTable {
        crate::policy::RewardTable::linear(&self.features, &self.truth.theta(u))
    }

    pub fn reward_tables(&self) -> Vec<crate::policy::RewardTable> {
        (0..self.num_groups()).map(|u| self.reward_table(u)).collect()
    }

    pub fn to_document(&self) -> WorldDocument {
        WorldDocument {
            config: self.config.clone(),
            features: self.features.to_rows(),
            rho: self.prompts.rho().to_vec(),
            b_star: matrix_rows(&self.truth.b_star),
            w_star: matrix_rows(&self.truth.w_star),
            ref_policy: self.truth.ref_policy.to_rows(),
        }
    }

    pub fn from_document(doc: WorldDocument) -> Result<Self> {
        doc.config.validate()?;
        let c = &doc.config;
        let features = FeatureMap::from_rows(c.num_prompts, c.num_responses, &doc.features, c.l_max)?;
        if features.dim() != c.feature_dim {
            return Err(Error::arg("feature width does not match feature_dim"));
        }
        let prompts = PromptDistribution::new(doc.rho)?;
        let b_star = rows_matrix(&doc.b_star, c.feature_dim, c.shared_dim, "b_star")?;
        let w_star = rows_matrix(&doc.w_star, c.shared_dim, c.num_groups, "w_star")?;
        let ref_policy = PolicyTable::from_rows(&doc.ref_policy)?;
        if !ref_policy.same_shape(c.num_prompts, c.num_responses) {
            return Err(Error::arg("ref_policy shape does not match the world"));
        }
        Ok(World {
            config: doc.config,
            features,
            prompts,
            truth: GroundTruth::new(b_star, w_star, ref_policy),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &self.to_document())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_document(crate::io::read_json(path)?)
    }

    /// Checks the linear-reward, simplex and full-support assumptions as predicates.
    pub fn check_assumptions(&self) -> Result<()> {
        self.features.check_norm_bound()?;
        let tol = 1e-9;
        for (k, col) in self.truth.b_star.column_iter().enumerate() {
            if col.norm() > self.config.b_max * (1.0 + tol) {
                return Err(Error::arg(format!("column {k} of B★ exceeds b_max")));
            }
        }
        for (u, col) in self.truth.w_star.column_iter().enumerate() {
            let s: f64 = col.iter().sum();
            if col.iter().any(|v| *v < 0.0) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::arg(format!("w★ column {u} is off the simplex")));
            }
        }
        if self.prompts.rho_min() <= 0.0 {
            return Err(Error::arg("ρ_min must be positive"));
        }
        if !self.truth.ref_policy.is_strictly_positive() {
            return Err(Error::arg("reference policy must be strictly positive"));
        }
        Ok(())
    }
}

/// On-disk layout of a world. Matrices are lists of rows; `features` has one
/// row per `(x, y)` in row-major order (`x * |Y| + y`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldDocument {
    pub config: WorldConfig,
    pub features: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub b_star: Vec<Vec<f64>>,
    pub w_star: Vec<Vec<f64>>,
    pub ref_policy: Vec<Vec<f64>>,
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn rows_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::arg(format!("{name} must be {nrows}×{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// `⟨φ(x, y), θ⟩`.
pub fn reward_of(theta: &[f64], phi: &FeatureMap, x: usize, y: usize) -> Result<f64> {
    if x >= phi.num_prompts() || y >= phi.num_responses() {
        return Err(Error::arg(format!("cell ({x}, {y}) is out of range")));
    }
    if theta.len() != phi.dim() {
        return Err(Error::arg("θ has the wrong dimension"));
    }
    Ok(dot(phi.phi(x, y), theta))
}

/// Reward gap at a fixed `(B, w)`: the largest over prompts of the smallest
/// absolute reward difference between two distinct responses.
pub fn reward_gap_xi(phi: &FeatureMap, b: &DMatrix<f64>, w: &[f64]) -> Result<f64> {
    if phi.num_responses() < 2 {
        return Err(Error::arg("reward gap needs at least two responses"));
    }
    if b.nrows() != phi.dim() || b.ncols() != w.len() {
        return Err(Error::arg("B and w have incompatible shapes"));
    }
    let theta: Vec<f64> = (b * nalgebra::DVector::from_column_slice(w)).iter().copied().collect();
    Ok(reward_gap_theta(phi, &theta))
}

pub(crate) fn reward_gap_theta(phi: &FeatureMap, theta: &[f64]) -> f64 {
    let ny = phi.num_responses();
    (0..phi.num_prompts())
        .map(|x| {
            let r: Vec<f64> = (0..ny).map(|y| dot(phi.phi(x, y), theta)).collect();
            let mut m = f64::INFINITY;
            for y in 0..ny {
                for y2 in y + 1..ny {
                    m = m.min((r[y] - r[y2]).abs());
                }
            }
            m
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
