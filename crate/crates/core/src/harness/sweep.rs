//! Parallel execution of a scenario grid and the on-disk result set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{fmt_f64, write_json};
use crate::{Error, Result};

use super::{run_trial, Method, ScenarioConfig, TrialResult};

pub const RESULTS_HEADER: [&str; 15] = [
    "n",
    "minority_prop",
    "seed",
    "method",
    "group",
    "subopt",
    "unregularized_value",
    "kl_value",
    "param_error",
    "eta",
    "best_response_subopt",
    "measured_kl",
    "kl_bound",
    "duality_gap",
    "converged",
];

const TRIALS_HEADER: [&str; 13] = [
    "n",
    "minority_prop",
    "seed",
    "group_selection_agreement",
    "psi_max",
    "delta_min",
    "n_maxmin",
    "xi_estimate",
    "comparison_lhs",
    "comparison_rhs",
    "comparison_vacuous",
    "all_converged",
    "wall_time",
];

/// Successful trials in grid order plus the messages of failed ones.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub scenario: ScenarioConfig,
    pub results: Vec<TrialResult>,
    pub errors: Vec<String>,
}

impl SweepOutcome {
    pub fn all_converged(&self) -> bool {
        self.errors.is_empty() && self.results.iter().all(TrialResult::all_converged)
    }
}

/// Runs every grid cell on `jobs` worker threads (all cores when `None`).
pub fn sweep(scenario: &ScenarioConfig, jobs: Option<usize>) -> Result<SweepOutcome> {
    scenario.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::arg(format!("cannot start worker pool: {e}")))?;
    let cells = scenario.grid();
    let outcomes: Vec<Result<TrialResult>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(n, p, seed)| {
                let r = run_trial(scenario, seed, n, p);
                log::debug!("trial n={n} minority={p} seed={seed} done");
                r
            })
            .collect()
    });
    let mut results = Vec::with_capacity(outcomes.len());
    let mut errors = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!("{e}");
                errors.push(e.to_string());
            }
        }
    }
    Ok(SweepOutcome {
        scenario: scenario.clone(),
        results,
        errors,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    /// Data rows, header excluded.
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: ScenarioConfig,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub grid_cells: usize,
    pub incomplete: bool,
    pub trial_errors: Vec<String>,
    pub files: Vec<FileEntry>,
}

/// Writes `results.csv`, `trials.csv`, `curves/*.csv` and `meta.json` under
/// `out_dir`. If a write fails, the manifest is still written with the files
/// completed so far and `incomplete` set, and the original error is returned.
pub fn emit(outcome: &SweepOutcome, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir.join("curves"))?;
    let mut manifest = Manifest {
        scenario: outcome.scenario.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        grid_cells: outcome.scenario.grid().len(),
        incomplete: !outcome.errors.is_empty(),
        trial_errors: outcome.errors.clone(),
        files: Vec::new(),
    };
    let writers: [(&str, fn(&SweepOutcome, &Path) -> Result<usize>); 6] = [
        ("results.csv", write_results),
        ("trials.csv", write_trials),
        ("curves/minority_vs_proportion.csv", write_minority_curve),
        ("curves/error_vs_n.csv", write_error_curve),
        ("curves/kl_vs_n.csv", write_kl_curve),
        ("curves/gap_vs_n_maxmin.csv", write_gap_curve),
    ];
    let mut failure = None;
    for (name, write) in writers {
        match write(outcome, &out_dir.join(name)) {
            Ok(rows) => manifest.files.push(FileEntry {
                path: name.to_string(),
                rows,
            }),
            Err(e) => {
                manifest.incomplete = true;
                failure = Some(e);
                break;
            }
        }
    }
    write_json(&out_dir.join("meta.json"), &manifest)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn flag(v: bool) -> String {
    u8::from(v).to_string()
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<usize> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    let mut count = 0;
    for row in rows {
        w.write_record(&row)?;
        count += 1;
    }
    w.flush()?;
    Ok(count)
}

fn cell(t: &TrialResult) -> [String; 3] {
    [t.n.to_string(), fmt_f64(t.minority_prop), t.seed.to_string()]
}

fn write_results(outcome: &SweepOutcome, path: &Path) -> Result<usize> {
    let rows = outcome.results.iter().flat_map(|t| {
        t.methods.iter().flat_map(move |m| {
            m.groups.iter().enumerate().map(move |(u, g)| {
                let mut row = cell(t).to_vec();
                row.extend([
                    m.method.name().to_string(),
                    u.to_string(),
                    fmt_f64(g.subopt),
                    fmt_f64(g.unregularized_value),
                    fmt_f64(g.kl_value),
                    fmt_f64(g.param_error),
                    fmt_f64(g.eta),
                    fmt_f64(g.best_response_subopt),
                    opt(g.measured_kl),
                    opt(g.kl_bound),
                    fmt_f64(m.duality_gap),
                    flag(m.converged),
                ]);
                row
            })
        })
    });
    write_rows(path, &RESULTS_HEADER, rows)
}

fn write_trials(outcome: &SweepOutcome, path: &Path) -> Result<usize> {
    let rows = outcome.results.iter().map(|t| {
        let mut row = cell(t).to_vec();
        let th = t.comparison_bound;
        row.extend([
            t.group_selection_agreement.map(flag).unwrap_or_default(),
            fmt_f64(t.psi_max),
            opt(t.delta_min),
            opt(t.n_maxmin),
            opt(th.map(|r| r.xi_estimate)),
            opt(th.map(|r| r.lhs)),
            opt(th.map(|r| r.rhs)),
            th.map(|r| flag(r.vacuous)).unwrap_or_default(),
            flag(t.all_converged()),
            fmt_f64(t.wall_time),
        ]);
        row
    });
    write_rows(path, &TRIALS_HEADER, rows)
}

/// Median of a nonempty sample; `NaN` entries sort last.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Groups a per-trial quantity by a key and takes medians, in key order.
fn medians<K: Ord>(items: impl IntoIterator<Item = (K, f64)>) -> BTreeMap<K, f64> {
    let mut buckets: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for (k, v) in items {
        buckets.entry(k).or_default().push(v);
    }
    buckets.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect()
}

/// Position of a grid value, used as an ordered stand-in for an `f64` key.
fn index_of(grid: &[f64], p: f64) -> usize {
    grid.iter().position(|&g| g.to_bits() == p.to_bits()).unwrap_or(usize::MAX)
}

fn write_minority_curve(outcome: &SweepOutcome, path: &Path) -> Result<usize> {
    let s = &outcome.scenario;
    let mut subopt = Vec::new();
    let mut gap = Vec::new();
    for t in &outcome.results {
        let minority = t.minority_group;
        let gold = t.method(Method::Gold).map(|m| m.groups[minority].subopt);
        for m in &t.methods {
            let key = (m.method, t.n, index_of(&s.minority_grid, t.minority_prop));
            let v = m.groups[minority].subopt;
            subopt.push((key, v));
            if let Some(g) = gold {
                gap.push((key, v - g));
            }
        }
    }
    let gap = medians(gap);
    let rows: Vec<Vec<String>> = medians(subopt)
        .into_iter()
        .map(|((method, n, p), v)| {
            vec![
                method.name().to_string(),
                n.to_string(),
                fmt_f64(s.minority_grid[p]),
                fmt_f64(v),
                opt(gap.get(&(method, n, p)).copied()),
            ]
        })
        .collect();
    write_rows(path, &["method", "n", "minority_prop", "median_subopt", "median_gap_to_gold"], rows)
}

fn write_error_curve(outcome: &SweepOutcome, path: &Path) -> Result<usize> {
    let s = &outcome.scenario;
    let items = outcome.results.iter().flat_map(|t| {
        t.methods.iter().filter(|m| m.method != Method::Gold).flat_map(move |m| {
            m.groups
                .iter()
                .enumerate()
                .map(move |(u, g)| ((m.method, u, index_of(&s.minority_grid, t.minority_prop), t.n), g.param_error))
        })
    });
    let rows: Vec<Vec<String>> = medians(items)
        .into_iter()
        .map(|((method, u, p, n), v)| vec![method.name().to_string(), u.to_string(), fmt_f64(s.minority_grid[p]), n.to_string(), fmt_f64(v)])
        .collect();
    write_rows(path, &["method", "group", "minority_prop", "n", "median_param_error"], rows)
}

fn write_kl_curve(outcome: &SweepOutcome, path: &Path) -> Result<usize> {
    let s = &outcome.scenario;
    let mut measured = Vec::new();
    let mut bound = Vec::new();
    for t in &outcome.results {
        let Some(sr) = t.method(Method::Sharedrep) else { continue };
        for (u, g) in sr.groups.iter().enumerate() {
            let key = (u, index_of(&s.minority_grid, t.minority_prop), t.n);
            if let (Some(m), Some(b)) = (g.measured_kl, g.kl_bound) {
                measured.push((key, m));
                bound.push((key, b));
            }
        }
    }
    let bound = medians(bound);
    let rows: Vec<Vec<String>> = medians(measured)
        .into_iter()
        .map(|(key @ (u, p, n), v)| vec![u.to_string(), fmt_f64(s.minority_grid[p]), n.to_string(), fmt_f64(v), fmt_f64(bound[&key])])
        .collect();
    write_rows(path, &["group", "minority_prop", "n", "median_measured_kl", "median_bound_leading_term"], rows)
}

fn write_gap_curve(outcome: &SweepOutcome, path: &Path) -> Result<usize> {
    let rows = outcome.results.iter().filter_map(|t| {
        let (d, nm) = (t.delta_min?, t.n_maxmin?);
        let mut row = cell(t).to_vec();
        row.extend([fmt_f64(d), fmt_f64(nm)]);
        Some(row)
    });
    write_rows(path, &["n", "minority_prop", "seed", "delta_min", "n_maxmin"], rows)
}

/// Path of a file listed in a manifest.
pub fn manifest_path(out_dir: &Path, entry: &FileEntry) -> PathBuf {
    out_dir.join(&entry.path)
}
