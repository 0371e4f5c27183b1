//! The lower branch of the Lambert W function and the piecewise entropy
//! modulus `f` with its inverse at half a gap.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `−1/e`, the branch point of `w e^w`.
pub const BRANCH_POINT: f64 = -0.367_879_441_171_442_33;

/// Values this many ulps below the branch point are treated as the branch point.
const BRANCH_SLACK: f64 = 4.0 * f64::EPSILON;

/// `W₋₁(x)`: the solution `w ≤ −1` of `w e^w = x` for `x ∈ [−1/e, 0)`.
pub fn lambert_w_minus1(x: f64) -> Result<f64> {
    let domain_error = Error::Domain {
        func: "lambert_w_minus1",
        value: x,
    };
    if !x.is_finite() || x >= 0.0 {
        return Err(domain_error);
    }
    if x <= BRANCH_POINT {
        if x >= BRANCH_POINT * (1.0 + BRANCH_SLACK) {
            return Ok(-1.0);
        }
        return Err(domain_error);
    }
    let mut w = if x < -0.25 {
        // Series about the branch point in p = −√(2(1 + e x)).
        let p = -(2.0 * (1.0 + E * x)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 * p * p * p / 72.0
    } else {
        let l1 = (-x).ln();
        l1 - (-l1).ln()
    };
    for _ in 0..64 {
        let ew = w.exp();
        let residual = w * ew - x;
        let derivative = ew * (w + 1.0);
        if derivative == 0.0 {
            break;
        }
        let correction = residual / (derivative - (w + 2.0) * residual / (2.0 * w + 2.0));
        let next = (w - correction).min(-1.0);
        let done = (next - w).abs() <= 4.0 * f64::EPSILON * w.abs();
        w = next;
        if done {
            break;
        }
    }
    if residual_ok(w, x) {
        return Ok(w);
    }
    Ok(bisect(x))
}

fn residual_ok(w: f64, x: f64) -> bool {
    w.is_finite() && w <= -1.0 && (w * w.exp() - x).abs() <= 1e-12 * x.abs()
}

/// `w e^w` decreases on `[−745, −1]` from about 0 to `−1/e`, so the root
/// is bracketed by that interval.
fn bisect(x: f64) -> f64 {
    let (mut lo, mut hi) = (-745.0_f64, -1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid * mid.exp() > x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `c = ln|Y| + 2`.
pub fn entropy_modulus_constant(y_size: usize) -> f64 {
    (y_size as f64).ln() + 2.0
}

/// Breakpoint `1/(2e²)` of `f`.
pub fn f_breakpoint() -> f64 {
    0.5 * (-2.0f64).exp()
}

/// `f(x) = c √(2x)` above `1/(2e²)` and `−c √(2x) ln √(2x)` below.
pub fn f_of(x: f64, y_size: usize) -> Result<f64> {
    if !(x >= 0.0) || y_size == 0 {
        return Err(Error::Domain { func: "f_of", value: x });
    }
    let c = entropy_modulus_constant(y_size);
    let root = (2.0 * x).sqrt();
    if x >= f_breakpoint() {
        Ok(c * root)
    } else if root == 0.0 {
        Ok(0.0)
    } else {
        Ok(-c * root * root.ln())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    LargeGap,
    SmallGap,
}

impl Regime {
    /// Large gap iff `Δ > (2/e) c`.
    pub fn of(delta_min: f64, y_size: usize) -> Self {
        if delta_min > 2.0 / E * entropy_modulus_constant(y_size) {
            Regime::LargeGap
        } else {
            Regime::SmallGap
        }
    }
}

/// `f⁻¹(Δ/2)`: `Δ²/(8c²)` in the large-gap regime and
/// `½ exp(2 W₋₁(−Δ/(2c)))` otherwise.
pub fn f_inverse_half_delta(delta_min: f64, y_size: usize) -> Result<f64> {
    if !(delta_min > 0.0) || !delta_min.is_finite() {
        return Err(Error::Domain {
            func: "f_inverse_half_delta",
            value: delta_min,
        });
    }
    let c = entropy_modulus_constant(y_size);
    match Regime::of(delta_min, y_size) {
        Regime::LargeGap => Ok(delta_min * delta_min / (8.0 * c * c)),
        Regime::SmallGap => Ok(0.5 * (2.0 * lambert_w_minus1(-delta_min / (2.0 * c))?).exp()),
    }
}
