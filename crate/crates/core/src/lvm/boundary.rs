//! Level set of the mapping variance that bounds the learned chart.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::*;
use crate::linalg::{nearest_neighbor_distances, row_vec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub alpha: f64,
    pub delta: f64,
}

/// Largest nearest-neighbour distance among the training latents.
pub fn default_delta(field: &MetricField) -> f64 {
    nearest_neighbor_distances(&field.latents).into_iter().fold(0.0, f64::max)
}

/// Maximum mapping variance over every training latent shifted by `delta`
/// in `n_dirs` random directions.
///
/// If that maximum does not exceed the variance at the training latents
/// themselves (possible for tiny `delta`), it is nudged just above them so
/// that every training latent lies strictly inside.
pub fn calibrate_boundary(field: &MetricField, delta: f64, n_dirs: usize, seed: u64) -> Result<BoundarySpec> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::param(format!("perturbation radius must be positive, got {delta}")));
    }
    if n_dirs == 0 {
        return Err(Error::param("need at least one perturbation direction"));
    }
    let q = field.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alpha = f64::NEG_INFINITY;
    let mut train_max = f64::NEG_INFINITY;
    for i in 0..field.latents.nrows() {
        let xi = row_vec(&field.latents, i);
        train_max = train_max.max(field.var_map(&xi)?);
        for _ in 0..n_dirs {
            let mut u: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            u.iter_mut().for_each(|v| *v /= norm);
            let x: Vec<f64> = xi.iter().zip(&u).map(|(a, b)| a + delta * b).collect();
            alpha = alpha.max(field.var_map(&x)?);
        }
    }
    if alpha <= train_max {
        alpha = train_max + 1e-12 * train_max.abs().max(1e-300);
    }
    Ok(BoundarySpec { alpha, delta })
}

/// `Var(φ(x)|x) ≤ α`; points on the level set count as inside.
pub fn inside_boundary(field: &MetricField, spec: &BoundarySpec, x: &[f64]) -> Result<bool> {
    Ok(field.var_map(x)? <= spec.alpha)
}
