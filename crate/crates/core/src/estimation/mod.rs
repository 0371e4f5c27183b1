//! Maximum-likelihood reward estimation and confidence widths.
//!
//! Two estimators share one loss. The shared-representation estimator fits
//! `Θ = B W` with a `d × K` matrix `B` whose columns lie in a ball of radius
//! `b_max` and simplex columns `w_u`; the independent baseline fits one
//! ball-constrained `θ_u` per group from that group's records alone.

mod fit;
mod loss;
mod projection;

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use fit::{fit_maxmin, fit_sharedrep, refine_sharedrep, FitOptions, FitReport};
pub use loss::{bce_gradient_theta, bce_gradients, bce_loss, bce_loss_theta, CompressedData, LOG_FLOOR};
pub use projection::{project_column_ball, project_columns_simplex, project_simplex};

use crate::data::InverseMetric;
use crate::world::{matrix_rows, rows_matrix};
use crate::{Error, Result};

/// Tolerance for the feasibility checks on fitted parameters.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct SharedRepParams {
    /// `d × K`.
    pub b: DMatrix<f64>,
    /// `K × U`.
    pub w: DMatrix<f64>,
}

impl SharedRepParams {
    /// `d × U` reward matrix `B W`.
    pub fn theta(&self) -> DMatrix<f64> {
        &self.b * &self.w
    }

    pub fn theta_of(&self, u: usize) -> Vec<f64> {
        (&self.b * self.w.column(u)).iter().copied().collect()
    }

    pub fn is_feasible(&self, b_max: f64) -> bool {
        self.b.column_iter().all(|c| c.norm() <= b_max + FEASIBILITY_TOL)
            && self.w.column_iter().all(|c| {
                c.iter().all(|v| *v >= -FEASIBILITY_TOL) && (c.sum() - 1.0).abs() <= FEASIBILITY_TOL
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaxMinParams {
    /// `d × U`.
    pub theta: DMatrix<f64>,
}

impl MaxMinParams {
    pub fn theta_of(&self, u: usize) -> Vec<f64> {
        self.theta.column(u).iter().copied().collect()
    }

    pub fn is_feasible(&self, b_max: f64) -> bool {
        self.theta.column_iter().all(|c| c.norm() <= b_max + FEASIBILITY_TOL)
    }
}

/// `‖θ̂ − θ★‖_{M+λI}` for a factorized metric.
pub fn param_error(estimate: &[f64], truth: &[f64], metric: &InverseMetric) -> f64 {
    let diff: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| a - b).collect();
    metric.norm(&diff)
}

/// Constants of the confidence radii.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSpec {
    pub dim: usize,
    pub lambda: f64,
    pub delta: f64,
    pub c_sr: f64,
    pub c_mm: f64,
    pub b_max: f64,
    pub l_max: f64,
    /// `1 / (2 + e^{−L B} + e^{L B})`.
    pub gamma: f64,
    /// `(d + ln(1/δ)) / γ²`.
    pub c_delta: f64,
}

impl ConfidenceSpec {
    /// Unit constants `C_SR = C_MM = 1`.
    pub fn new(dim: usize, lambda: f64, delta: f64, b_max: f64, l_max: f64) -> Result<Self> {
        Self::with_constants(dim, lambda, delta, b_max, l_max, 1.0, 1.0)
    }

    pub fn with_constants(dim: usize, lambda: f64, delta: f64, b_max: f64, l_max: f64, c_sr: f64, c_mm: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::config("lambda", "must be nonnegative"));
        }
        if !(b_max >= 0.0 && l_max >= 0.0 && b_max.is_finite() && l_max.is_finite()) {
            return Err(Error::config("b_max", "bounds must be nonnegative reals"));
        }
        if !(c_sr > 0.0 && c_mm > 0.0) {
            return Err(Error::config("c_sr", "constants must be positive"));
        }
        let product = l_max * b_max;
        let gamma = 1.0 / (2.0 + (-product).exp() + product.exp());
        let c_delta = (dim as f64 + (1.0 / delta).ln()) / (gamma * gamma);
        Ok(Self {
            dim,
            lambda,
            delta,
            c_sr,
            c_mm,
            b_max,
            l_max,
            gamma,
            c_delta,
        })
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    /// `C_SR √(C_δ/N + λ B_max²)`.
    pub fn eta_sr(&self, n: usize) -> Result<f64> {
        Ok(self.c_sr * self.width(n)?)
    }

    /// `C_MM √(C_δ/N_u + λ B_max²)`.
    pub fn eta_mm(&self, n_u: usize) -> Result<f64> {
        Ok(self.c_mm * self.width(n_u)?)
    }

    fn width(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::arg("confidence width needs at least one sample"));
        }
        Ok((self.c_delta / n as f64 + self.lambda * self.b_max * self.b_max).sqrt())
    }
}

/// On-disk fitted parameters. `b` and `w` are absent for the per-group fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub b: Option<Vec<Vec<f64>>>,
    pub w: Option<Vec<Vec<f64>>>,
    pub theta: Vec<Vec<f64>>,
    pub fit_report: FitReport,
}

impl ParamsDocument {
    pub fn from_sharedrep(params: &SharedRepParams, report: &FitReport) -> Self {
        Self {
            b: Some(matrix_rows(&params.b)),
            w: Some(matrix_rows(&params.w)),
            theta: matrix_rows(&params.theta()),
            fit_report: report.clone(),
        }
    }

    pub fn from_maxmin(params: &MaxMinParams, report: &FitReport) -> Self {
        Self {
            b: None,
            w: None,
            theta: matrix_rows(&params.theta),
            fit_report: report.clone(),
        }
    }

    /// `d × U` reward matrix stored in the document.
    pub fn theta_matrix(&self) -> Result<DMatrix<f64>> {
        let nrows = self.theta.len();
        let ncols = self.theta.first().map_or(0, Vec::len);
        rows_matrix(&self.theta, nrows, ncols, "theta")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}
