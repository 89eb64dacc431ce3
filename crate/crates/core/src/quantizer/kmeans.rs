//! Lloyd's algorithm specialised to one dimension.
//!
//! The channel is sorted once; with sorted centroids every cluster is a
//! contiguous run of the sorted values, so an iteration costs `O(K log n)`
//! via binary search plus prefix sums instead of `O(n K)`.

use serde::{Deserialize, Serialize};

use super::{distinct_sorted, finalize, from_centroids, sorted_f64, ClusterFit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid move, relative to the
    /// channel's value range.
    pub tol: f64,
    /// Record the objective after every iteration in `ClusterFit::sse_history`.
    #[serde(default)]
    pub track_history: bool,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            track_history: false,
        }
    }
}

/// Cluster one channel into at most `k` levels.
///
/// Centroid `j` starts at the `(j + 0.5) / k` quantile of the channel
/// (linear interpolation between order statistics). When
/// the channel has no more than `k` distinct values they become the codebook
/// and the error is zero.
pub fn kmeans_channel(w: &[f32], k: usize, opts: &KMeansOptions) -> Result<ClusterFit> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let sorted = sorted_f64(w)?;
    let distinct = distinct_sorted(&sorted);
    if distinct.len() <= k {
        let centroids = distinct.iter().map(|&v| v as f32).collect();
        return Ok(from_centroids(w, centroids, 0, Vec::new()));
    }

    let n = sorted.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0f64);
    let mut acc = 0.0;
    for &v in &sorted {
        acc += v;
        prefix.push(acc);
    }
    let range = sorted[n - 1] - sorted[0];
    let tol = opts.tol * range;

    let mut centroids: Vec<f64> = (0..k).map(|j| quantile(&sorted, (j as f64 + 0.5) / k as f64)).collect();
    let mut bounds = vec![0usize; k + 1];
    let mut prev_bounds = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        assign(&sorted, &centroids, &mut bounds);
        repair_empty(&sorted, &mut centroids, &mut bounds);
        if bounds == prev_bounds {
            // same partition as last time: centroids are already its means
            if opts.track_history {
                history.push(sse_of(&sorted, &centroids, &bounds));
            }
            break;
        }
        let mut max_move = 0.0f64;
        for j in 0..k {
            let (lo, hi) = (bounds[j], bounds[j + 1]);
            if hi > lo {
                let mean = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
                max_move = max_move.max((mean - centroids[j]).abs());
                centroids[j] = mean;
            }
        }
        if opts.track_history {
            history.push(sse_of(&sorted, &centroids, &bounds));
        }
        if max_move < tol {
            break;
        }
        prev_bounds.clone_from(&bounds);
    }

    assign(&sorted, &centroids, &mut bounds);
    repair_empty(&sorted, &mut centroids, &mut bounds);
    Ok(finalize(w, &sorted, &bounds, iterations, history))
}

/// Linearly interpolated quantile of sorted data (position `q * (n - 1)`).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Nearest-centroid segmentation of the sorted values. `centroids` must be
/// ascending; bounds[j]..bounds[j + 1] is cluster `j`.
fn assign(sorted: &[f64], centroids: &[f64], bounds: &mut [usize]) {
    let k = centroids.len();
    let n = sorted.len();
    bounds[0] = 0;
    bounds[k] = n;
    for j in 0..k - 1 {
        let (lo, hi) = (centroids[j], centroids[j + 1]);
        let cut = sorted.partition_point(|&x| x - lo <= hi - x);
        bounds[j + 1] = cut.max(bounds[j]);
    }
}

fn segment_sse(sorted: &[f64], lo: usize, hi: usize, c: f64) -> f64 {
    sorted[lo..hi].iter().map(|&x| (x - c) * (x - c)).sum()
}

fn sse_of(sorted: &[f64], centroids: &[f64], bounds: &[usize]) -> f64 {
    (0..centroids.len())
        .map(|j| segment_sse(sorted, bounds[j], bounds[j + 1], centroids[j]))
        .sum()
}

/// Give every empty cluster half of the worst cluster, split at its median.
fn repair_empty(sorted: &[f64], centroids: &mut [f64], bounds: &mut [usize]) {
    let k = centroids.len();
    for _ in 0..4 * k {
        let Some(empty) = (0..k).find(|&j| bounds[j] == bounds[j + 1]) else {
            return;
        };
        let worst = (0..k)
            .filter(|&j| bounds[j + 1] - bounds[j] >= 2)
            .map(|j| (j, segment_sse(sorted, bounds[j], bounds[j + 1], centroids[j])))
            .filter(|&(_, s)| s > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some((worst, _)) = worst else {
            return;
        };
        let (lo, hi) = (bounds[worst], bounds[worst + 1]);
        let mut mid = lo + (hi - lo) / 2;
        // keep equal values on one side so both halves are distinct levels
        while mid > lo && sorted[mid - 1] == sorted[mid] {
            mid -= 1;
        }
        if mid == lo {
            mid = lo + (hi - lo) / 2;
            while mid < hi && sorted[mid - 1] == sorted[mid] {
                mid += 1;
            }
        }
        if mid == lo || mid == hi {
            return;
        }
        let left = super::segment_mean(sorted, lo, mid);
        let right = super::segment_mean(sorted, mid, hi);
        centroids[worst] = left;
        centroids[empty] = right;
        centroids.sort_by(f64::total_cmp);
        let mut fresh = vec![0usize; k + 1];
        assign(sorted, centroids, &mut fresh);
        if fresh.as_slice() == &bounds[..] {
            return;
        }
        bounds.copy_from_slice(&fresh);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts() -> KMeansOptions {
        KMeansOptions {
            track_history: true,
            ..KMeansOptions::default()
        }
    }

    #[test]
    fn two_point_masses() {
        let fit = kmeans_channel(&[1.0, 1.0, 1.0, 5.0, 5.0, 5.0], 2, &opts()).unwrap();
        assert_eq!(fit.centroids, vec![1.0, 5.0]);
        assert_eq!(fit.sse, 0.0);
        assert_eq!(fit.assignments, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn four_points_two_clusters() {
        // exhaustive over the 3 contiguous splits: {0}|{1,2,3} = 2, {0,1}|{2,3} = 1,
        // {0,1,2}|{3} = 2
        let fit = kmeans_channel(&[0.0, 1.0, 2.0, 3.0], 2, &opts()).unwrap();
        assert_eq!(fit.centroids, vec![0.5, 2.5]);
        assert_eq!(fit.sse, 1.0);
    }

    #[test]
    fn constant_channel() {
        let fit = kmeans_channel(&[0.25; 9], 8, &opts()).unwrap();
        assert_eq!(fit.centroids, vec![0.25]);
        assert_eq!(fit.sse, 0.0);
        assert!(fit.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn fewer_distinct_than_k_is_exact() {
        let fit = kmeans_channel(&[3.0, -1.0, 3.0, 2.0], 16, &opts()).unwrap();
        assert_eq!(fit.centroids, vec![-1.0, 2.0, 3.0]);
        assert_eq!(fit.sse, 0.0);
    }

    #[test]
    fn rejects_nan_and_empty() {
        assert!(matches!(kmeans_channel(&[1.0, f32::NAN], 2, &opts()), Err(Error::Numeric(_))));
        assert!(matches!(kmeans_channel(&[], 2, &opts()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn empty_cluster_is_repaired() {
        // heavy duplication makes several quantile seeds coincide
        let mut w = vec![0.0f32; 50];
        w.extend([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let fit = kmeans_channel(&w, 4, &opts()).unwrap();
        assert_eq!(fit.centroids.len(), 4);
    }

    fn channel() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-4.0f32..4.0, 1..200)
    }

    proptest! {
        #[test]
        fn objective_never_increases(w in channel(), k in prop::sample::select(vec![2usize, 4, 8, 16])) {
            let fit = kmeans_channel(&w, k, &opts()).unwrap();
            for pair in fit.sse_history.windows(2) {
                prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-12, "{:?}", fit.sse_history);
            }
            if let Some(&last) = fit.sse_history.last() {
                prop_assert!(fit.sse <= last * (1.0 + 1e-6) + 1e-9);
            }
        }

        #[test]
        fn centroids_ascending_and_assignments_nearest(w in channel(), k in 1usize..=16) {
            let fit = kmeans_channel(&w, k, &KMeansOptions::default()).unwrap();
            prop_assert!(fit.centroids.len() <= k);
            prop_assert!(fit.centroids.windows(2).all(|p| p[0] < p[1]));
            for (&x, &a) in w.iter().zip(&fit.assignments) {
                let d = (x - fit.centroids[a as usize]).abs();
                prop_assert!(fit.centroids.iter().all(|&c| d <= (x - c).abs()));
            }
        }

        #[test]
        fn shift_scale_equivariant(
            w in prop::collection::vec(-4.0f32..4.0, 2..100),
            k in prop::sample::select(vec![4usize, 8, 16]),
            t in prop::sample::select(vec![0.25f32, 0.5, 2.0, 4.0]),
            u in prop::sample::select(vec![-2.0f32, 0.0, 1.0, 8.0]),
        ) {
            // power-of-two scale and small dyadic shift keep the transformed
            // inputs exact, so only centroid arithmetic can round
            let w: Vec<f32> = w.iter().map(|x| (x * 65536.0).round() / 65536.0).collect();
            let moved: Vec<f32> = w.iter().map(|&x| t * x + u).collect();
            let a = kmeans_channel(&w, k, &KMeansOptions::default()).unwrap();
            let b = kmeans_channel(&moved, k, &KMeansOptions::default()).unwrap();
            prop_assert_eq!(&a.assignments, &b.assignments);
            for (ca, cb) in a.centroids.iter().zip(&b.centroids) {
                prop_assert!((t * ca + u - cb).abs() <= 1e-5 * (1.0 + cb.abs()));
            }
        }
    }
}
