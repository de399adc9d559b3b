use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::PlugInEstimate;
use crate::error::{Error, Result};
use crate::matching::{align_columns, permute_columns};

/// Index of the first estimate within `2ε` of at least half of the others.
pub fn amplify<T>(items: &[T], eps: f64, dist: impl Fn(&T, &T) -> f64) -> Result<usize> {
    let n = items.len();
    if n < 3 {
        return Err(Error::InvalidInput(alloc::format!(
            "amplification needs at least 3 estimates, got {n}"
        )));
    }
    (0..n)
        .find(|&i| {
            let close = (0..n)
                .filter(|&j| j != i && dist(&items[i], &items[j]) <= 2.0 * eps)
                .count();
            2 * close >= n - 1
        })
        .ok_or(Error::AmplificationFailed)
}

pub fn amplify_scalars(values: &[f64], eps: f64) -> Result<f64> {
    amplify(values, eps, |a, b| (a - b).abs()).map(|i| values[i])
}

/// Frobenius distance between permutation-aligned `M` plus the `∞`-distance of `π`.
pub fn estimate_distance(a: &PlugInEstimate, b: &PlugInEstimate) -> f64 {
    let Ok(perm) = align_columns(&a.m, &b.m) else {
        return f64::INFINITY;
    };
    let mut sq = 0.0;
    for v in 0..3 {
        sq += (&a.m[v] - permute_columns(&b.m[v], &perm)).norm_squared();
    }
    let pi = perm
        .iter()
        .enumerate()
        .map(|(j, &p)| (a.pi[j] - b.pi[p]).abs())
        .fold(0.0, f64::max);
    sq.sqrt() + pi
}

/// Half the median pairwise distance, used when no radius is configured.
pub fn default_radius(estimates: &[PlugInEstimate]) -> f64 {
    let mut d = Vec::new();
    for i in 0..estimates.len() {
        for j in i + 1..estimates.len() {
            d.push(estimate_distance(&estimates[i], &estimates[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    0.5 * d[d.len() / 2]
}

/// Amplification over matrix estimates; returns the chosen index.
pub fn amplify_estimates(estimates: &[PlugInEstimate], radius: Option<f64>) -> Result<usize> {
    let eps = radius.unwrap_or_else(|| default_radius(estimates));
    amplify(estimates, eps, estimate_distance)
}
