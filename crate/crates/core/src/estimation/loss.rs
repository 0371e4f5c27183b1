//! Binary cross-entropy preference loss and its gradients.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::data::{log_sigmoid, sigmoid, PreferenceDataset};
use crate::world::dot;

use super::SharedRepParams;

/// `ln(1e-300)`: the floor applied to each log-likelihood term.
pub const LOG_FLOOR: f64 = -690.775_527_898_213_7;

fn clamped_log_sigmoid(t: f64) -> f64 {
    log_sigmoid(t).max(LOG_FLOOR)
}

/// Per-record loss at an arbitrary `d × U` reward matrix `Θ`.
///
/// Terms are accumulated with Neumaier compensation so that the mean of equal
/// terms reproduces the term to the last bit.
pub fn bce_loss_theta(theta: &DMatrix<f64>, dataset: &PreferenceDataset) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for (i, r) in dataset.records().iter().enumerate() {
        let mu = dot(dataset.diff(i), theta.column(r.group).as_slice());
        let term = if r.label == 1 {
            clamped_log_sigmoid(mu)
        } else {
            clamped_log_sigmoid(-mu)
        };
        let next = sum + term;
        carry += if sum.abs() >= term.abs() {
            (sum - next) + term
        } else {
            (term - next) + sum
        };
        sum = next;
    }
    -(sum + carry) / dataset.len() as f64
}

/// Gradient of [`bce_loss_theta`] with respect to `Θ`.
pub fn bce_gradient_theta(theta: &DMatrix<f64>, dataset: &PreferenceDataset) -> DMatrix<f64> {
    let mut grad = DMatrix::zeros(theta.nrows(), theta.ncols());
    let n = dataset.len() as f64;
    for (i, r) in dataset.records().iter().enumerate() {
        let delta = dataset.diff(i);
        let mu = dot(delta, theta.column(r.group).as_slice());
        let residual = (sigmoid(mu) - f64::from(r.label)) / n;
        let mut col = grad.column_mut(r.group);
        for (g, d) in col.iter_mut().zip(delta) {
            *g += residual * d;
        }
    }
    grad
}

/// Loss at `Θ = B W`.
pub fn bce_loss(params: &SharedRepParams, dataset: &PreferenceDataset) -> f64 {
    bce_loss_theta(&params.theta(), dataset)
}

/// `(∂/∂B, ∂/∂W)` of [`bce_loss`]: `G Wᵀ` and `Bᵀ G` where `G = ∂/∂Θ`.
pub fn bce_gradients(params: &SharedRepParams, dataset: &PreferenceDataset) -> (DMatrix<f64>, DMatrix<f64>) {
    let g = bce_gradient_theta(&params.theta(), dataset);
    (&g * params.w.transpose(), params.b.transpose() * &g)
}

/// The dataset collapsed to counts per distinct `(prompt, unordered pair, group)`.
///
/// Every record is oriented so that the smaller response index comes first
/// (flipping the label with it), which leaves its loss term unchanged. Loss
/// and gradient evaluations then cost time proportional to the number of
/// distinct comparisons rather than to `N`.
#[derive(Clone, Debug)]
pub struct CompressedData {
    dim: usize,
    num_groups: usize,
    total: f64,
    groups: Vec<usize>,
    deltas: Vec<f64>,
    positives: Vec<f64>,
    counts: Vec<f64>,
}

impl CompressedData {
    pub fn from_dataset(dataset: &PreferenceDataset) -> Self {
        let mut table: BTreeMap<(usize, usize, usize, usize), (usize, f64, f64)> = BTreeMap::new();
        for (i, r) in dataset.records().iter().enumerate() {
            let (lo, hi, first_wins) = if r.first < r.second {
                (r.first, r.second, r.label == 1)
            } else {
                (r.second, r.first, r.label == 0)
            };
            let e = table.entry((r.group, r.prompt, lo, hi)).or_insert((i, 0.0, 0.0));
            if first_wins {
                e.1 += 1.0;
            }
            e.2 += 1.0;
        }
        let dim = dataset.dim();
        let mut out = Self {
            dim,
            num_groups: dataset.num_groups(),
            total: dataset.len() as f64,
            groups: Vec::with_capacity(table.len()),
            deltas: Vec::with_capacity(table.len() * dim),
            positives: Vec::with_capacity(table.len()),
            counts: Vec::with_capacity(table.len()),
        };
        for ((group, _, lo, _), (i, pos, count)) in table {
            let r = dataset.records()[i];
            let sign = if r.first == lo { 1.0 } else { -1.0 };
            out.groups.push(group);
            out.deltas.extend(dataset.diff(i).iter().map(|v| sign * v));
            out.positives.push(pos);
            out.counts.push(count);
        }
        out
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entries(&self) -> usize {
        self.groups.len()
    }

    /// Records of group `u` relabelled as group 0 of a single-group problem,
    /// normalized by `N_u`.
    pub fn single_group(&self, u: usize) -> Self {
        let mut out = Self {
            dim: self.dim,
            num_groups: 1,
            total: 0.0,
            groups: Vec::new(),
            deltas: Vec::new(),
            positives: Vec::new(),
            counts: Vec::new(),
        };
        for a in 0..self.num_entries() {
            if self.groups[a] == u {
                out.groups.push(0);
                out.deltas.extend_from_slice(self.delta(a));
                out.positives.push(self.positives[a]);
                out.counts.push(self.counts[a]);
                out.total += self.counts[a];
            }
        }
        out
    }

    fn delta(&self, a: usize) -> &[f64] {
        &self.deltas[a * self.dim..(a + 1) * self.dim]
    }

    pub fn loss(&self, theta: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for a in 0..self.num_entries() {
            let mu = dot(self.delta(a), theta.column(self.groups[a]).as_slice());
            let pos = self.positives[a];
            let neg = self.counts[a] - pos;
            if pos > 0.0 {
                acc -= pos * clamped_log_sigmoid(mu);
            }
            if neg > 0.0 {
                acc -= neg * clamped_log_sigmoid(-mu);
            }
        }
        acc / self.total
    }

    pub fn loss_and_gradient(&self, theta: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let mut grad = DMatrix::zeros(self.dim, self.num_groups);
        let mut acc = 0.0;
        for a in 0..self.num_entries() {
            let u = self.groups[a];
            let delta = self.delta(a);
            let mu = dot(delta, theta.column(u).as_slice());
            let pos = self.positives[a];
            let count = self.counts[a];
            let neg = count - pos;
            if pos > 0.0 {
                acc -= pos * clamped_log_sigmoid(mu);
            }
            if neg > 0.0 {
                acc -= neg * clamped_log_sigmoid(-mu);
            }
            let residual = (count * sigmoid(mu) - pos) / self.total;
            let mut col = grad.column_mut(u);
            for (g, d) in col.iter_mut().zip(delta) {
                *g += residual * d;
            }
        }
        (acc / self.total, grad)
    }
}
