//! Globally optimal 1-D K-means.
//!
//! Optimal clusters of scalars are contiguous runs of the sorted values, so
//! the best K-partition is found by dynamic programming over split points.
//! Split points of optimal solutions are monotone in the prefix length, which
//! lets each DP layer be filled by divide and conquer in `O(n log n)`.

use super::{distinct_sorted, finalize, from_centroids, sorted_f64, ClusterFit, MAX_CODEBOOK};
use crate::error::{Error, Result};

pub const DEFAULT_ORACLE_CAP: usize = 4096;

pub fn kmeans_exact_1d(w: &[f32], k: usize) -> Result<ClusterFit> {
    kmeans_exact_1d_capped(w, k, DEFAULT_ORACLE_CAP)
}

pub fn kmeans_exact_1d_capped(w: &[f32], k: usize, cap: usize) -> Result<ClusterFit> {
    if w.len() > cap {
        return Err(Error::OracleCap { len: w.len(), cap });
    }
    if k == 0 || k > MAX_CODEBOOK {
        return Err(Error::Domain(format!("k = {k} is outside 1..={MAX_CODEBOOK}")));
    }
    let sorted = sorted_f64(w)?;
    let distinct = distinct_sorted(&sorted);
    if distinct.len() <= k {
        let centroids = distinct.iter().map(|&v| v as f32).collect();
        return Ok(from_centroids(w, centroids, 0, Vec::new()));
    }
    let bounds = optimal_bounds(&sorted, k);
    Ok(finalize(w, &sorted, &bounds, 0, Vec::new()))
}

struct Costs {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Costs {
    fn new(sorted: &[f64]) -> Self {
        // centring on the median keeps the prefix sums small
        let shift = sorted[sorted.len() / 2];
        let mut s1 = Vec::with_capacity(sorted.len() + 1);
        let mut s2 = Vec::with_capacity(sorted.len() + 1);
        let (mut a, mut b) = (0.0f64, 0.0f64);
        s1.push(0.0);
        s2.push(0.0);
        for &v in sorted {
            let x = v - shift;
            a += x;
            b += x * x;
            s1.push(a);
            s2.push(b);
        }
        Self { s1, s2 }
    }

    /// Squared error of sorted[i..j] around its mean.
    #[inline]
    fn cost(&self, i: usize, j: usize) -> f64 {
        let n = (j - i) as f64;
        let s = self.s1[j] - self.s1[i];
        (self.s2[j] - self.s2[i] - s * s / n).max(0.0)
    }
}

/// Segment bounds (length `k + 1`) of an optimal `k`-partition.
fn optimal_bounds(sorted: &[f64], k: usize) -> Vec<usize> {
    let n = sorted.len();
    let costs = Costs::new(sorted);
    // prev[j]: best cost of the first j values with m - 1 clusters
    let mut prev: Vec<f64> = (0..=n)
        .map(|j| if j == 0 { 0.0 } else { costs.cost(0, j) })
        .collect();
    let mut splits: Vec<Vec<usize>> = vec![vec![0; n + 1]];
    for m in 2..=k {
        let mut cur = vec![f64::INFINITY; n + 1];
        let mut arg = vec![0usize; n + 1];
        fill_layer(&costs, &prev, &mut cur, &mut arg, m, n, m - 1, n - 1);
        splits.push(arg);
        prev = cur;
    }
    let mut bounds = vec![0usize; k + 1];
    bounds[k] = n;
    for m in (1..k).rev() {
        bounds[m] = splits[m][bounds[m + 1]];
    }
    bounds
}

/// Fill cur[jlo..=jhi] for `m` clusters knowing the optimal last split for
/// every j lies in [optlo, opthi].
#[allow(clippy::too_many_arguments)]
fn fill_layer(
    costs: &Costs,
    prev: &[f64],
    cur: &mut [f64],
    arg: &mut [usize],
    jlo: usize,
    jhi: usize,
    optlo: usize,
    opthi: usize,
) {
    if jlo > jhi {
        return;
    }
    let j = jlo + (jhi - jlo) / 2;
    let mut best = f64::INFINITY;
    let mut best_i = optlo;
    for i in optlo..=opthi.min(j - 1) {
        let v = prev[i] + costs.cost(i, j);
        if v < best {
            best = v;
            best_i = i;
        }
    }
    cur[j] = best;
    arg[j] = best_i;
    if j > jlo {
        fill_layer(costs, prev, cur, arg, jlo, j - 1, optlo, best_i);
    }
    fill_layer(costs, prev, cur, arg, j + 1, jhi, best_i, opthi);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{kmeans_channel, KMeansOptions};
    use proptest::prelude::*;

    /// Plain O(K n^2) DP with direct (non-prefix) costs.
    fn quadratic_dp_sse(w: &[f32], k: usize) -> f64 {
        let mut s: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let cost = |i: usize, j: usize| {
            let m = s[i..j].iter().sum::<f64>() / (j - i) as f64;
            s[i..j].iter().map(|x| (x - m) * (x - m)).sum::<f64>()
        };
        let k = k.min(n);
        let mut d = vec![vec![f64::INFINITY; n + 1]; k + 1];
        d[0][0] = 0.0;
        for m in 1..=k {
            for j in m..=n {
                for i in (m - 1)..j {
                    let v = d[m - 1][i] + cost(i, j);
                    if v < d[m][j] {
                        d[m][j] = v;
                    }
                }
            }
        }
        (1..=k).map(|m| d[m][n]).fold(f64::INFINITY, f64::min)
    }

    /// Every way to cut the sorted values into at most k contiguous runs.
    fn exhaustive_sse(w: &[f32], k: usize) -> f64 {
        let mut s: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << (n - 1)) {
            if mask.count_ones() as usize + 1 > k {
                continue;
            }
            let mut total = 0.0;
            let mut start = 0;
            for end in 1..=n {
                if end == n || mask & (1 << (end - 1)) != 0 {
                    let seg = &s[start..end];
                    let m = seg.iter().sum::<f64>() / seg.len() as f64;
                    total += seg.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                    start = end;
                }
            }
            best = best.min(total);
        }
        best
    }

    #[test]
    fn small_examples() {
        let fit = kmeans_exact_1d(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(fit.sse, 1.0);
        assert_eq!(exhaustive_sse(&[0.0, 1.0, 2.0, 3.0], 2), 1.0);

        let fit = kmeans_exact_1d(&[0.0, 10.0, 11.0], 2).unwrap();
        assert_eq!(fit.centroids, vec![0.0, 10.5]);
        assert_eq!(fit.sse, 0.5);
        assert_eq!(exhaustive_sse(&[0.0, 10.0, 11.0], 2), 0.5);

        let w = [0.3, -1.0, 2.5, 7.0];
        assert_eq!(kmeans_exact_1d(&w, 4).unwrap().sse, 0.0);
    }

    #[test]
    fn cap_is_enforced() {
        let w = vec![0.0f32; 11];
        assert!(matches!(
            kmeans_exact_1d_capped(&w, 4, 10),
            Err(Error::OracleCap { len: 11, cap: 10 })
        ));
    }

    proptest! {
        #[test]
        fn matches_exhaustive(w in prop::collection::vec(-5.0f32..5.0, 1..11), k in 1usize..5) {
            let got = kmeans_exact_1d(&w, k).unwrap().sse;
            let want = exhaustive_sse(&w, k);
            prop_assert!((got - want).abs() <= 1e-6 * (1.0 + want), "{got} vs {want}");
        }

        #[test]
        fn matches_quadratic_dp(w in prop::collection::vec(-5.0f32..5.0, 1..80), k in prop::sample::select(vec![2usize, 4, 8, 16])) {
            let got = kmeans_exact_1d(&w, k).unwrap().sse;
            let want = quadratic_dp_sse(&w, k);
            prop_assert!((got - want).abs() <= 1e-6 * (1.0 + want), "{got} vs {want}");
        }

        #[test]
        fn lower_bounds_lloyd(w in prop::collection::vec(-5.0f32..5.0, 1..300), k in prop::sample::select(vec![4usize, 8, 16])) {
            let exact = kmeans_exact_1d(&w, k).unwrap().sse;
            let lloyd = kmeans_channel(&w, k, &KMeansOptions::default()).unwrap().sse;
            prop_assert!(lloyd >= exact * (1.0 - 1e-9) - 1e-12, "lloyd {lloyd} < exact {exact}");
        }
    }
}
