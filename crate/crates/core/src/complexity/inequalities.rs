//! Entropies and divergences between finite distributions.

use crate::{Error, Result};

/// `h(p) = −p ln p − (1 − p) ln(1 − p)`, zero at both endpoints.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain {
            func: "binary_entropy",
            value: p,
        });
    }
    let term = |v: f64| if v > 0.0 { -v * v.ln() } else { 0.0 };
    Ok(term(p) + term(1.0 - p))
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    crate::policy::row_entropy(p)
}

/// `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `Σ p ln(p/q)` with `0 ln(0/q) = 0`; `+∞` when `p > 0 = q` somewhere.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            acc += a * (a / b).ln();
        }
    }
    acc.max(0.0)
}

/// `TV(p, q) ln|Ω| + h(TV(p, q))`, an upper bound on `|H(p) − H(q)|`.
pub fn fannes_bound(p: &[f64], q: &[f64], y_size: usize) -> Result<f64> {
    if p.len() != q.len() || p.len() > y_size || y_size == 0 {
        return Err(Error::arg("distributions must live on the same set of the stated size"));
    }
    let tv = tv_distance(p, q).min(1.0);
    Ok(tv * (y_size as f64).ln() + binary_entropy(tv)?)
}
