//! Per-channel quantizers: K-means codebooks (Lloyd and an exact 1-D
//! dynamic-programming solver) and the uniform round-to-nearest baseline.

mod exact;
mod kmeans;
mod uniform;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use exact::{kmeans_exact_1d, kmeans_exact_1d_capped, DEFAULT_ORACLE_CAP};
pub use kmeans::{kmeans_channel, KMeansOptions};
pub use uniform::{
    rtn_matrix, uniform_dequantize, uniform_quantize, DeltaVariant, UniformQuantParams,
};

/// Largest supported codebook (4-bit channels).
pub const MAX_CODEBOOK: usize = 16;

/// Result of clustering one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFit {
    /// Strictly ascending, at most `K` entries.
    pub centroids: Vec<f32>,
    /// Index into `centroids` for every input value, in input order.
    pub assignments: Vec<u8>,
    /// Sum of squared distances to the assigned centroids.
    pub sse: f64,
    pub iterations: usize,
    /// Objective after each Lloyd iteration, when requested.
    pub sse_history: Vec<f64>,
}

impl ClusterFit {
    pub fn codebook(&self) -> Result<ChannelCodebook> {
        ChannelCodebook::from_f32(&self.centroids)
    }
}

/// Which clustering routine fits channel codebooks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clusterer {
    #[default]
    Lloyd,
    /// Globally optimal 1-D clustering; limited to short channels.
    Exact,
}

/// Fit `k` centroids to `w` with the chosen routine.
pub fn fit_channel(w: &[f32], k: usize, clusterer: Clusterer, opts: &KMeansOptions) -> Result<ClusterFit> {
    match clusterer {
        Clusterer::Lloyd => kmeans_channel(w, k, opts),
        Clusterer::Exact => kmeans_exact_1d(w, k),
    }
}

/// Half-precision centroid table of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCodebook {
    centroids: Vec<f16>,
}

impl ChannelCodebook {
    /// Round to half precision, sort and drop duplicates.
    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::from_f16(values.iter().map(|&v| f16::from_f32(v)).collect())
    }

    pub fn from_f16(mut centroids: Vec<f16>) -> Result<Self> {
        if let Some(bad) = centroids.iter().find(|c| !c.is_finite()) {
            return Err(Error::Numeric(format!(
                "centroid {bad} is not representable in half precision"
            )));
        }
        centroids.sort_by(|a, b| a.total_cmp(b));
        // -0 and +0 compare equal; keep one
        centroids.dedup_by(|a, b| a == b);
        if centroids.is_empty() || centroids.len() > MAX_CODEBOOK {
            return Err(Error::CorruptData(format!(
                "codebook must hold 1..={MAX_CODEBOOK} centroids, got {}",
                centroids.len()
            )));
        }
        Ok(Self { centroids })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroids(&self) -> &[f16] {
        &self.centroids
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.centroids.iter().map(|c| c.to_f32()).collect()
    }
}

/// Index of the nearest entry of an ascending table; ties go to the lower index.
#[inline]
pub(crate) fn nearest_index(table: &[f32], x: f32) -> usize {
    let hi = table.partition_point(|&c| c < x);
    if hi == 0 {
        return 0;
    }
    if hi == table.len() {
        return hi - 1;
    }
    let below = x as f64 - table[hi - 1] as f64;
    let above = table[hi] as f64 - x as f64;
    if below <= above {
        hi - 1
    } else {
        hi
    }
}

/// Map each weight to its nearest centroid.
pub fn quantize_channel(w: &[f32], cb: &ChannelCodebook) -> Result<Vec<u8>> {
    let table = cb.to_f32();
    quantize_with_table(w, &table)
}

pub(crate) fn quantize_with_table(w: &[f32], table: &[f32]) -> Result<Vec<u8>> {
    w.iter()
        .map(|&x| {
            if x.is_nan() {
                Err(Error::Numeric("NaN weight".into()))
            } else {
                Ok(nearest_index(table, x) as u8)
            }
        })
        .collect()
}

pub fn dequantize_channel(indices: &[u8], cb: &ChannelCodebook) -> Result<Vec<f32>> {
    let table = cb.to_f32();
    indices
        .iter()
        .map(|&i| {
            table.get(i as usize).copied().ok_or_else(|| {
                Error::CorruptData(format!("index {i} out of range for {} centroids", table.len()))
            })
        })
        .collect()
}

/// Sorted copy of the channel in `f64`, rejecting non-finite values.
pub(crate) fn sorted_f64(w: &[f32]) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::EmptyInput("cannot cluster an empty channel".into()));
    }
    if let Some(bad) = w.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite weight {bad}")));
    }
    let mut s: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Distinct values of a sorted slice.
pub(crate) fn distinct_sorted(sorted: &[f64]) -> Vec<f64> {
    let mut d = sorted.to_vec();
    d.dedup();
    d
}

#[inline]
pub(crate) fn segment_mean(sorted: &[f64], lo: usize, hi: usize) -> f64 {
    sorted[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
}

/// Turn final segment bounds over the sorted channel into a fit: centroids
/// are segment means (rounded to `f32`), assignments nearest-centroid.
pub(crate) fn finalize(w: &[f32], sorted: &[f64], bounds: &[usize], iterations: usize, history: Vec<f64>) -> ClusterFit {
    let mut centroids: Vec<f32> = bounds
        .windows(2)
        .filter(|b| b[1] > b[0])
        .map(|b| segment_mean(sorted, b[0], b[1]) as f32)
        .collect();
    centroids.sort_by(f32::total_cmp);
    centroids.dedup();
    from_centroids(w, centroids, iterations, history)
}

pub(crate) fn from_centroids(w: &[f32], centroids: Vec<f32>, iterations: usize, sse_history: Vec<f64>) -> ClusterFit {
    let mut sse = 0.0f64;
    let assignments = w
        .iter()
        .map(|&x| {
            let j = nearest_index(&centroids, x);
            let d = x as f64 - centroids[j] as f64;
            sse += d * d;
            j as u8
        })
        .collect();
    ClusterFit {
        centroids,
        assignments,
        sse,
        iterations,
        sse_history,
    }
}
