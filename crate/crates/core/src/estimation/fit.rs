//! Projected-gradient maximum-likelihood fits.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PreferenceDataset;
use crate::rng::{stream_rng, Stream};
use crate::world::uniform_simplex;
use crate::{Error, Result};

use super::loss::CompressedData;
use super::projection::{project_column_ball_mut, project_columns_simplex};
use super::{MaxMinParams, SharedRepParams};

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 80;
const MIN_STEP: f64 = 1e-12;
const MAX_STEP: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Stop once the projected-gradient norm is at most this.
    pub tol: f64,
    pub max_iters: usize,
    pub restarts: usize,
    /// First trial step of the line search.
    pub lr0: f64,
    pub seed: u64,
    /// Keep the loss after every iteration in the report.
    pub record_trace: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iters: 20_000,
            restarts: 5,
            lr0: 1.0,
            seed: 0,
            record_trace: false,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::config("tol", "must be positive"));
        }
        if self.restarts == 0 {
            return Err(Error::config("restarts", "must be at least 1"));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::config("lr0", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_loss: f64,
    pub iterations: usize,
    /// Projected-gradient norm at the returned point.
    pub grad_norm: f64,
    pub converged: bool,
    pub wall_time: f64,
    /// Index of the restart that produced the returned point.
    pub restart: usize,
    /// Groups with no records, whose parameters the data cannot determine.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unidentified_groups: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_trace: Vec<f64>,
    /// Per-group reports of an independent per-group fit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_group: Vec<FitReport>,
}

/// Outcome of one backtracking search along the projected-gradient arc.
enum Step {
    Accepted { point: DMatrix<f64>, loss: f64 },
    Stalled,
}

fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn armijo_search(
    x: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    loss: f64,
    initial_step: f64,
    project: impl Fn(&mut DMatrix<f64>),
    eval: impl Fn(&DMatrix<f64>) -> f64,
) -> Step {
    let mut step = initial_step;
    for _ in 0..MAX_HALVINGS {
        let mut cand = x - grad * step;
        project(&mut cand);
        let decrease = frob_dot(grad, &(&cand - x));
        if decrease >= 0.0 {
            return Step::Stalled;
        }
        let value = eval(&cand);
        let required = ARMIJO * decrease;
        // When the demanded decrease is below the resolution of the loss,
        // fall back to requiring plain non-increase.
        let below_resolution = -required < 1e-15 * loss.abs();
        if value <= loss + required || (below_resolution && value <= loss) {
            return Step::Accepted { point: cand, loss: value };
        }
        step *= 0.5;
    }
    Step::Stalled
}

/// Barzilai–Borwein step from the last accepted move of one block.
fn bb_step(prev: &Option<(DMatrix<f64>, DMatrix<f64>)>, x: &DMatrix<f64>, grad: &DMatrix<f64>, fallback: f64) -> f64 {
    match prev {
        Some((px, pg)) => {
            let s = x - px;
            let y = grad - pg;
            let sy = frob_dot(&s, &y);
            if sy > 0.0 {
                (frob_dot(&s, &s) / sy).clamp(MIN_STEP, MAX_STEP)
            } else {
                fallback
            }
        }
        None => fallback,
    }
}

fn mapping_residual(x: &DMatrix<f64>, grad: &DMatrix<f64>, project: impl Fn(&mut DMatrix<f64>)) -> f64 {
    let mut p = x - grad;
    project(&mut p);
    (x - p).norm_squared()
}

struct Descent {
    loss: f64,
    iterations: usize,
    grad_norm: f64,
    converged: bool,
    trace: Vec<f64>,
}

fn descend_sharedrep(data: &CompressedData, params: &mut SharedRepParams, b_max: f64, opts: &FitOptions) -> Descent {
    let ball = |m: &mut DMatrix<f64>| project_column_ball_mut(m, b_max);
    let simplex = |m: &mut DMatrix<f64>| project_columns_simplex(m);
    let mut prev_b = None;
    let mut prev_w = None;
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let (loss, g) = data.loss_and_gradient(&params.theta());
        let grad_b = &g * params.w.transpose();
        let grad_w = params.b.transpose() * &g;
        let grad_norm = (mapping_residual(&params.b, &grad_b, ball) + mapping_residual(&params.w, &grad_w, simplex)).sqrt();
        if grad_norm <= opts.tol || iterations >= opts.max_iters {
            return Descent {
                loss,
                iterations,
                grad_norm,
                converged: grad_norm <= opts.tol,
                trace,
            };
        }
        iterations += 1;

        let w = params.w.clone();
        let t_b = bb_step(&prev_b, &params.b, &grad_b, opts.lr0);
        let step_b = armijo_search(&params.b, &grad_b, loss, t_b, ball, |b| data.loss(&(b * &w)));
        let mut moved = false;
        let mut loss_b = loss;
        if let Step::Accepted { point, loss } = step_b {
            prev_b = Some((params.b.clone(), grad_b));
            params.b = point;
            loss_b = loss;
            moved = true;
        }

        let (_, g) = data.loss_and_gradient(&params.theta());
        let grad_w = params.b.transpose() * &g;
        let b = params.b.clone();
        let t_w = bb_step(&prev_w, &params.w, &grad_w, opts.lr0);
        let step_w = armijo_search(&params.w, &grad_w, loss_b, t_w, simplex, |w| data.loss(&(&b * w)));
        let mut loss_w = loss_b;
        if let Step::Accepted { point, loss } = step_w {
            prev_w = Some((params.w.clone(), grad_w));
            params.w = point;
            loss_w = loss;
            moved = true;
        }
        if opts.record_trace {
            trace.push(loss_w);
        }
        if !moved {
            let (loss, g) = data.loss_and_gradient(&params.theta());
            let grad_b = &g * params.w.transpose();
            let grad_w = params.b.transpose() * &g;
            let grad_norm = (mapping_residual(&params.b, &grad_b, ball) + mapping_residual(&params.w, &grad_w, simplex)).sqrt();
            return Descent {
                loss,
                iterations,
                grad_norm,
                converged: grad_norm <= opts.tol,
                trace,
            };
        }
    }
}

fn descend_ball(data: &CompressedData, theta: &mut DMatrix<f64>, b_max: f64, opts: &FitOptions) -> Descent {
    let ball = |m: &mut DMatrix<f64>| project_column_ball_mut(m, b_max);
    let mut prev = None;
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let (loss, grad) = data.loss_and_gradient(theta);
        let grad_norm = mapping_residual(theta, &grad, ball).sqrt();
        if grad_norm <= opts.tol || iterations >= opts.max_iters {
            return Descent {
                loss,
                iterations,
                grad_norm,
                converged: grad_norm <= opts.tol,
                trace,
            };
        }
        iterations += 1;
        let t = bb_step(&prev, theta, &grad, opts.lr0);
        match armijo_search(theta, &grad, loss, t, ball, |c| data.loss(c)) {
            Step::Accepted { point, loss } => {
                prev = Some((theta.clone(), grad));
                *theta = point;
                if opts.record_trace {
                    trace.push(loss);
                }
            }
            Step::Stalled => {
                return Descent {
                    loss,
                    iterations,
                    grad_norm,
                    converged: false,
                    trace,
                }
            }
        }
    }
}

fn report_from(d: Descent, restart: usize, started: Instant) -> FitReport {
    FitReport {
        final_loss: d.loss,
        iterations: d.iterations,
        grad_norm: d.grad_norm,
        converged: d.converged,
        wall_time: started.elapsed().as_secs_f64(),
        restart,
        unidentified_groups: Vec::new(),
        loss_trace: d.trace,
        per_group: Vec::new(),
    }
}

/// Lowest loss wins; equal losses go to the earliest restart.
fn best_of<T>(runs: Vec<(T, FitReport)>) -> (T, FitReport) {
    let mut best: Option<(T, FitReport)> = None;
    for run in runs {
        let better = match &best {
            None => true,
            Some((_, r)) => run.1.final_loss < r.final_loss,
        };
        if better {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

fn check_inputs(dataset: &PreferenceDataset, b_max: f64, opts: &FitOptions) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::arg("cannot fit an empty dataset"));
    }
    if !(b_max.is_finite() && b_max > 0.0) {
        return Err(Error::config("b_max", "must be a positive real"));
    }
    opts.validate()
}

fn random_sharedrep_start(seed: u64, restart: usize, d: usize, k: usize, u: usize, b_max: f64) -> SharedRepParams {
    let mut rng = stream_rng(seed, Stream::Optimizer, restart as u64);
    let mut b = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    for mut col in b.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col *= 0.5 * b_max / n;
        }
    }
    let mut w = DMatrix::zeros(k, u);
    for g in 0..u {
        w.column_mut(g).copy_from_slice(&uniform_simplex(&mut rng, k));
    }
    SharedRepParams { b, w }
}

/// Fits `(B̂, Ŵ)` by alternating projected gradient with restarts.
pub fn fit_sharedrep(dataset: &PreferenceDataset, k: usize, b_max: f64, opts: &FitOptions) -> Result<(SharedRepParams, FitReport)> {
    check_inputs(dataset, b_max, opts)?;
    let d = dataset.dim();
    if k == 0 || k > d {
        return Err(Error::arg(format!("shared dimension K = {k} must lie in 1..={d}")));
    }
    let started = Instant::now();
    let data = CompressedData::from_dataset(dataset);
    let runs: Vec<(SharedRepParams, FitReport)> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut params = random_sharedrep_start(opts.seed, r, d, k, dataset.num_groups(), b_max);
            let descent = descend_sharedrep(&data, &mut params, b_max, opts);
            (params, report_from(descent, r, started))
        })
        .collect();
    let (params, mut report) = best_of(runs);
    report.wall_time = started.elapsed().as_secs_f64();
    report.unidentified_groups = dataset.empty_groups();
    Ok((params, report))
}

/// Runs the SharedRep descent from a given point, without restarts.
pub fn refine_sharedrep(
    dataset: &PreferenceDataset,
    init: &SharedRepParams,
    b_max: f64,
    opts: &FitOptions,
) -> Result<(SharedRepParams, FitReport)> {
    check_inputs(dataset, b_max, opts)?;
    if init.b.nrows() != dataset.dim() || init.w.ncols() != dataset.num_groups() || init.b.ncols() != init.w.nrows() {
        return Err(Error::arg("initial parameters do not match the dataset"));
    }
    let started = Instant::now();
    let data = CompressedData::from_dataset(dataset);
    let mut params = init.clone();
    let descent = descend_sharedrep(&data, &mut params, b_max, opts);
    let mut report = report_from(descent, 0, started);
    report.unidentified_groups = dataset.empty_groups();
    Ok((params, report))
}

/// Independent ball-constrained fits, one per group on that group's records.
///
/// The returned report aggregates the groups: the loss is the pooled loss,
/// the iteration count and projected-gradient norm are the largest over
/// groups, and the fit is converged only if every group converged.
pub fn fit_maxmin(dataset: &PreferenceDataset, b_max: f64, opts: &FitOptions) -> Result<(MaxMinParams, FitReport)> {
    check_inputs(dataset, b_max, opts)?;
    if let Some(&u) = dataset.empty_groups().first() {
        return Err(Error::EmptyGroup(u));
    }
    let started = Instant::now();
    let d = dataset.dim();
    let num_groups = dataset.num_groups();
    let data = CompressedData::from_dataset(dataset);
    let fits: Vec<(DMatrix<f64>, FitReport)> = (0..num_groups)
        .into_par_iter()
        .map(|u| {
            let started = Instant::now();
            let group_data = data.single_group(u);
            let runs: Vec<(DMatrix<f64>, FitReport)> = (0..opts.restarts)
                .map(|r| {
                    let index = (1u64 << 40) | ((u as u64) << 20) | r as u64;
                    let mut rng = stream_rng(opts.seed, Stream::Optimizer, index);
                    let mut theta = DMatrix::from_fn(d, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let n = theta.norm();
                    if n > 0.0 {
                        theta *= 0.5 * b_max / n;
                    }
                    let descent = descend_ball(&group_data, &mut theta, b_max, opts);
                    (theta, report_from(descent, r, started))
                })
                .collect();
            let (theta, mut report) = best_of(runs);
            report.wall_time = started.elapsed().as_secs_f64();
            (theta, report)
        })
        .collect();
    let mut theta = DMatrix::zeros(d, num_groups);
    let mut report = FitReport {
        converged: true,
        ..FitReport::default()
    };
    for (u, (t, r)) in fits.into_iter().enumerate() {
        theta.column_mut(u).copy_from(&t.column(0));
        report.final_loss += r.final_loss * dataset.n_per_group()[u] as f64 / dataset.len() as f64;
        report.iterations = report.iterations.max(r.iterations);
        report.grad_norm = report.grad_norm.max(r.grad_norm);
        report.converged &= r.converged;
        report.per_group.push(r);
    }
    report.wall_time = started.elapsed().as_secs_f64();
    Ok((MaxMinParams { theta }, report))
}
