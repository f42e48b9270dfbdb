use rand::seq::index;
use rand::Rng;

use crate::error::{DeptError, Result};

/// `p_k = n_k^τ / Σ_j n_j^τ`.
pub fn temperature_weights(sizes: &[usize], tau: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(DeptError::InvalidArgument("no sources".into()));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(DeptError::InvalidArgument(format!("temperature {tau} must be >= 0")));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(DeptError::InvalidArgument("source of size 0".into()));
    }
    let raw: Vec<f64> = sizes.iter().map(|&n| (n as f64).powf(tau)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|x| x / total).collect())
}

/// Uniform sample of `num_selected` distinct ids from `0..num_sources`, sorted ascending.
pub fn sample_sources<R: Rng + ?Sized>(
    num_sources: usize,
    num_selected: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if num_selected > num_sources {
        return Err(DeptError::InvalidArgument(format!(
            "cannot select {num_selected} of {num_sources} sources"
        )));
    }
    let mut picked = index::sample(rng, num_sources, num_selected).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
