use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::fmt_f64;
use crate::world::FeatureMap;
use crate::{Error, Result};

/// Row tolerance for stochastic matrices.
pub const ROW_SUM_TOL: f64 = 1e-10;

/// A real-valued |X|×|Y| table, stored row-major by prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable {
    num_prompts: usize,
    num_responses: usize,
    values: Vec<f64>,
}

impl RewardTable {
    pub fn from_fn(num_prompts: usize, num_responses: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(num_prompts * num_responses);
        for x in 0..num_prompts {
            for y in 0..num_responses {
                values.push(f(x, y));
            }
        }
        Self {
            num_prompts,
            num_responses,
            values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_responses = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || num_responses == 0 {
            return Err(Error::arg("reward table must be non-empty"));
        }
        if rows.iter().any(|r| r.len() != num_responses) {
            return Err(Error::arg("reward table rows have unequal lengths"));
        }
        Ok(Self {
            num_prompts: rows.len(),
            num_responses,
            values: rows.concat(),
        })
    }

    /// Linear rewards `⟨φ(x,y), θ⟩` for every cell.
    pub fn linear(phi: &FeatureMap, theta: &[f64]) -> Self {
        Self::from_fn(phi.num_prompts(), phi.num_responses(), |x, y| {
            crate::world::dot(phi.phi(x, y), theta)
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.num_responses + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.num_responses..(x + 1) * self.num_responses]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.num_responses)
    }

    /// Adds `shift[x]` to every entry of row `x`.
    pub fn shifted_per_prompt(&self, shift: &[f64]) -> Self {
        Self::from_fn(self.num_prompts, self.num_responses, |x, y| self.get(x, y) + shift[x])
    }

    /// Entry-wise `Σ_u weights[u] · tables[u]`.
    pub fn mixture(tables: &[RewardTable], weights: &[f64]) -> Self {
        let first = &tables[0];
        let mut values = vec![0.0; first.values.len()];
        for (t, &w) in tables.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for (v, r) in values.iter_mut().zip(&t.values) {
                *v += w * r;
            }
        }
        Self {
            num_prompts: first.num_prompts,
            num_responses: first.num_responses,
            values,
        }
    }

    pub(crate) fn same_shape(&self, other_prompts: usize, other_responses: usize) -> bool {
        self.num_prompts == other_prompts && self.num_responses == other_responses
    }
}

/// Conditional distribution `π(y|x)` over a finite response set, one row per prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PolicyTable {
    num_prompts: usize,
    num_responses: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn uniform(num_prompts: usize, num_responses: usize) -> Self {
        let p = 1.0 / num_responses as f64;
        Self {
            num_prompts,
            num_responses,
            probs: vec![p; num_prompts * num_responses],
        }
    }

    /// Deterministic policy choosing `choice[x]` at prompt `x`.
    pub fn point_masses(num_responses: usize, choice: &[usize]) -> Self {
        let mut probs = vec![0.0; choice.len() * num_responses];
        for (x, &y) in choice.iter().enumerate() {
            probs[x * num_responses + y] = 1.0;
        }
        Self {
            num_prompts: choice.len(),
            num_responses,
            probs,
        }
    }

    /// Validating constructor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_responses = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || num_responses == 0 {
            return Err(Error::arg("policy must have at least one prompt and one response"));
        }
        for (x, row) in rows.iter().enumerate() {
            if row.len() != num_responses {
                return Err(Error::arg(format!("policy row {x} has the wrong length")));
            }
            check_row(x, row)?;
        }
        Ok(Self {
            num_prompts: rows.len(),
            num_responses,
            probs: rows.concat(),
        })
    }

    /// Builds a table from unnormalized nonnegative rows.
    pub(crate) fn from_flat_unchecked(num_prompts: usize, num_responses: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), num_prompts * num_responses);
        Self {
            num_prompts,
            num_responses,
            probs,
        }
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probs[x * self.num_responses + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.probs[x * self.num_responses..(x + 1) * self.num_responses]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.num_responses)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// Checks the row-stochastic invariant.
    pub fn validate(&self) -> Result<()> {
        self.rows().enumerate().try_for_each(|(x, r)| check_row(x, r))
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    /// Index of the largest entry per row, ties to the smallest index.
    pub fn modes(&self) -> Vec<usize> {
        self.rows().map(argmax_first).collect()
    }

    /// Largest per-row total-variation distance to `other`.
    pub fn max_row_tv(&self, other: &PolicyTable) -> f64 {
        self.rows()
            .zip(other.rows())
            .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub(crate) fn same_shape(&self, other_prompts: usize, other_responses: usize) -> bool {
        self.num_prompts == other_prompts && self.num_responses == other_responses
    }

    /// Writes `prompt,response,probability` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["prompt", "response", "probability"])?;
        for x in 0..self.num_prompts {
            for y in 0..self.num_responses {
                w.write_record([x.to_string(), y.to_string(), fmt_f64(self.get(x, y))])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut cells: Vec<(usize, usize, f64)> = Vec::new();
        for rec in r.deserialize() {
            let (x, y, p): (usize, usize, f64) = rec?;
            cells.push((x, y, p));
        }
        let nx = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let ny = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let mut rows = vec![vec![0.0; ny]; nx];
        for (x, y, p) in cells {
            rows[x][y] = p;
        }
        Self::from_rows(&rows)
    }
}

impl TryFrom<Vec<Vec<f64>>> for PolicyTable {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<PolicyTable> for Vec<Vec<f64>> {
    fn from(p: PolicyTable) -> Self {
        p.to_rows()
    }
}

fn check_row(x: usize, row: &[f64]) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::arg(format!("policy row {x} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::arg(format!("policy row {x} sums to {s}")));
    }
    Ok(())
}

/// First index attaining the maximum.
pub(crate) fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
