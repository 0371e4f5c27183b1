//! Euclidean projections onto the estimator constraint sets.

use nalgebra::DMatrix;

/// Projection onto the probability simplex by sort-and-threshold.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut threshold = sorted[0] - 1.0;
    for (j, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let candidate = (cumulative - 1.0) / (j as f64 + 1.0);
        if s - candidate > 0.0 {
            threshold = candidate;
        }
    }
    v.iter().map(|&x| (x - threshold).max(0.0)).collect()
}

/// Projects every column of `w` onto the simplex in place.
pub fn project_columns_simplex(w: &mut DMatrix<f64>) {
    for mut col in w.column_iter_mut() {
        let p = project_simplex(col.as_slice());
        col.copy_from_slice(&p);
    }
}

/// Rescales each column whose norm exceeds `b_max` back onto the ball.
pub fn project_column_ball(b: &DMatrix<f64>, b_max: f64) -> DMatrix<f64> {
    let mut out = b.clone();
    project_column_ball_mut(&mut out, b_max);
    out
}

pub(crate) fn project_column_ball_mut(b: &mut DMatrix<f64>, b_max: f64) {
    for mut col in b.column_iter_mut() {
        let n = col.norm();
        if n > b_max {
            col *= b_max / n;
        }
    }
}
