//! One-dimensional flat-kernel mean shift.

use serde::{Deserialize, Serialize};

use crate::error::{BtiError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftParams {
    /// Optional early stop once a point moves less than this; at `0` each
    /// climb runs to its exact fixed point.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Converged modes closer than `merge_fraction · bandwidth` are merged.
    pub merge_fraction: f64,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        Self {
            tolerance: 0.0,
            max_iterations: 500,
            merge_fraction: 0.5,
        }
    }
}

/// Cluster labels per sample and the cluster centroids, strictly descending.
/// Label `0` is the cluster with the largest centroid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClusterResult<T> {
    pub labels: Vec<usize>,
    pub centroids: Vec<T>,
}

impl<T> ClusterResult<T> {
    pub fn cluster_count(&self) -> usize {
        self.centroids.len()
    }
}

/// Climbs from `start` by repeatedly replacing it with the mean of all
/// scores within `bandwidth`. The climb is at its fixed point once the
/// window stops changing.
fn climb(sorted: &[f64], start: f64, bandwidth: f64, params: &MeanShiftParams) -> f64 {
    let mut x = start;
    let mut prev = None;
    for _ in 0..params.max_iterations {
        let lo = sorted.partition_point(|&y| y < x - bandwidth);
        let hi = sorted.partition_point(|&y| y <= x + bandwidth);
        if prev == Some((lo, hi)) || lo == hi {
            break;
        }
        prev = Some((lo, hi));
        let next = sorted[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        let shift = (next - x).abs();
        x = next;
        if shift < params.tolerance {
            break;
        }
    }
    x
}

pub fn mean_shift_1d<T: Scalar>(
    scores: &[T],
    bandwidth: T,
    params: &MeanShiftParams,
) -> Result<ClusterResult<T>> {
    if scores.is_empty() {
        return Err(BtiError::EmptyScores);
    }
    let bw = bandwidth.to_f64_lossy();
    if !(bw > 0.0) || !bw.is_finite() {
        return Err(BtiError::InvalidParameter(format!("bandwidth must be positive, got {bw}")));
    }
    let values: Vec<f64> = scores.iter().map(|s| s.to_f64_lossy()).collect();
    if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(BtiError::NonFiniteScore(bad));
    }
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);

    let modes: Vec<f64> = values.iter().map(|&v| climb(&sorted, v, bw, params)).collect();

    // Walk the modes from the top; a gap wider than the merge radius starts a
    // new cluster.
    let mut order: Vec<usize> = (0..modes.len()).collect();
    order.sort_by(|&a, &b| modes[b].total_cmp(&modes[a]).then(a.cmp(&b)));
    let radius = params.merge_fraction * bw;
    let mut labels = vec![0usize; modes.len()];
    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut prev = f64::INFINITY;
    for &i in &order {
        if sums.is_empty() || prev - modes[i] > radius {
            sums.push((0.0, 0));
        }
        let k = sums.len() - 1;
        labels[i] = k;
        sums[k].0 += modes[i];
        sums[k].1 += 1;
        prev = modes[i];
    }
    let centroids = sums
        .into_iter()
        .map(|(s, n)| T::from_f64_lossy(s / n as f64))
        .collect();
    Ok(ClusterResult { labels, centroids })
}

pub const DEFAULT_BANDWIDTH_QUANTILE: f64 = 0.3;
pub const MIN_BANDWIDTH: f64 = 1e-3;

/// The `quantile` of all pairwise absolute differences, by nearest rank
/// (`sorted[ceil(quantile · M) − 1]` over the `M` distances), floored at
/// [`MIN_BANDWIDTH`].
pub fn estimate_bandwidth<T: Scalar>(scores: &[T], quantile: f64) -> T {
    let values: Vec<f64> = scores.iter().map(|s| s.to_f64_lossy()).collect();
    let mut dists = Vec::with_capacity(values.len() * values.len().saturating_sub(1) / 2);
    for (i, &a) in values.iter().enumerate() {
        for &b in &values[i + 1..] {
            dists.push((a - b).abs());
        }
    }
    if dists.is_empty() {
        return T::from_f64_lossy(MIN_BANDWIDTH);
    }
    dists.sort_by(f64::total_cmp);
    let q = quantile.clamp(0.0, 1.0);
    let rank = ((q * dists.len() as f64).ceil() as usize).clamp(1, dists.len());
    let value = dists[rank - 1];
    T::from_f64_lossy(if value.is_finite() { value.max(MIN_BANDWIDTH) } else { MIN_BANDWIDTH })
}
