//! Sampling estimate of the smallest reward gap over the parameter class.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{stream_rng, Stream};
use crate::world::{reward_gap_xi, uniform_simplex, World};
use crate::{Error, Result};

/// Gaps `reward_gap_xi(φ, B, w)` at `samples` independent draws of `B`
/// (columns uniform in the `b_max` ball) and `w` (uniform on the simplex).
/// The first `m` draws do not depend on `samples`.
pub fn xi_draws(world: &World, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let (d, k) = (world.config.feature_dim, world.config.shared_dim);
    let b_max = world.config.b_max;
    let mut rng = stream_rng(seed, Stream::XiSampling, 0);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut b = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        for mut col in b.column_iter_mut() {
            let n = col.norm();
            let radius = b_max * rng.random::<f64>().powf(1.0 / d as f64);
            if n > 0.0 {
                col *= radius / n;
            }
        }
        let w = uniform_simplex(&mut rng, k);
        out.push(reward_gap_xi(&world.features, &b, &w)?);
    }
    Ok(out)
}

/// Minimum of [`xi_draws`]: an upper bound on the infimum of the reward gap.
pub fn estimate_xi_inf(world: &World, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::arg("gap estimate needs at least one sample"));
    }
    Ok(xi_draws(world, samples, seed)?.into_iter().fold(f64::INFINITY, f64::min))
}
