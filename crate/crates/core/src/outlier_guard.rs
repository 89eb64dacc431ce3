//! Outlier protection.
//!
//! Two kinds of weights are kept in half precision instead of being
//! quantized: whole input channels with the largest activation norms, and the
//! individual weights with the largest first-pass quantization residuals.
//! Both are stored together in one CSR matrix.

use std::cmp::Ordering;

use half::f16;
use rayon::prelude::*;

use crate::allocation::round_half_up;
use crate::calibration::ActivationNorms;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, WeightMatrix};

/// Input channels kept whole in half precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelOutlierSet {
    /// Strictly increasing channel indices.
    pub indices: Vec<usize>,
    /// The original row of each protected channel.
    pub rows: Vec<Vec<f16>>,
}

impl ChannelOutlierSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Individual weights kept in half precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ElementOutlierSet {
    /// `(row, col)` pairs in row-major order.
    pub coords: Vec<(usize, usize)>,
    pub values: Vec<f16>,
}

impl ElementOutlierSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Number of items a ratio selects out of `population`.
pub fn outlier_count(ratio: f64, population: usize) -> usize {
    round_half_up(ratio * population as f64)
}

fn check_ratio(ratio: f64, what: &str) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Domain(format!("{what} ratio {ratio} is outside [0, 1)")));
    }
    Ok(())
}

/// Channels with the largest activation norms, in the order they would be
/// picked (ties go to the lower index).
pub fn top_channels(a: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
    order.truncate(count);
    order.sort_unstable();
    order
}

/// Pull the most salient channels out of `w`. Returns the remaining matrix
/// (protected rows zeroed) and the protected rows.
pub fn extract_activation_outliers(
    w: &WeightMatrix,
    a: &ActivationNorms,
    ratio_act: f64,
) -> Result<(WeightMatrix, ChannelOutlierSet)> {
    check_ratio(ratio_act, "activation outlier")?;
    if a.len() != w.rows() {
        return Err(Error::Shape(format!(
            "{} activation norms for a matrix with {} input channels",
            a.len(),
            w.rows()
        )));
    }
    let count = outlier_count(ratio_act, w.rows());
    if count >= w.rows() && w.rows() > 0 {
        return Err(Error::EmptyInput(format!(
            "ratio {ratio_act} protects all {} channels",
            w.rows()
        )));
    }
    let indices = top_channels(&a.values, count);
    let mut remaining = w.clone();
    let mut rows = Vec::with_capacity(indices.len());
    for &i in &indices {
        rows.push(w.row(i).iter().map(|&v| f16::from_f32(v)).collect());
        remaining.row_mut(i).fill(0.0);
    }
    Ok((remaining, ChannelOutlierSet { indices, rows }))
}

#[derive(Clone, Copy)]
struct Candidate {
    residual: f64,
    row: usize,
    col: usize,
}

/// Largest residual first, then row-major position.
fn by_priority(a: &Candidate, b: &Candidate) -> Ordering {
    b.residual
        .total_cmp(&a.residual)
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

fn keep_top(mut c: Vec<Candidate>, k: usize) -> Vec<Candidate> {
    if c.len() > k {
        if k == 0 {
            return Vec::new();
        }
        c.select_nth_unstable_by(k - 1, by_priority);
        c.truncate(k);
    }
    c
}

/// Weights of `w_prime` with the largest `|w_prime - w_prime_q|`, skipping
/// protected channels. Values are the originals from `w_prime`.
pub fn extract_quant_outliers(
    w_prime: &WeightMatrix,
    w_prime_q: &Matrix,
    ratio_q: f64,
    protected: &[usize],
) -> Result<ElementOutlierSet> {
    check_ratio(ratio_q, "quantization outlier")?;
    if w_prime.shape() != w_prime_q.shape() {
        return Err(Error::Shape(format!(
            "weights {:?} and quantized weights {:?} differ in shape",
            w_prime.shape(),
            w_prime_q.shape()
        )));
    }
    let (d_in, d_out) = w_prime.shape();
    let k = outlier_count(ratio_q, d_in * d_out);
    if k == 0 {
        return Ok(ElementOutlierSet::default());
    }
    let mut is_protected = vec![false; d_in];
    for &p in protected {
        if p < d_in {
            is_protected[p] = true;
        }
    }
    // per-row top-k merged in row order; the priority order is total, so the
    // selected set does not depend on how the work was split
    let partial: Vec<Vec<Candidate>> = (0..d_in)
        .into_par_iter()
        .map(|row| {
            if is_protected[row] {
                return Vec::new();
            }
            let c = w_prime
                .row(row)
                .iter()
                .zip(w_prime_q.row(row))
                .enumerate()
                .map(|(col, (&a, &b))| Candidate {
                    residual: (a as f64 - b as f64).abs(),
                    row,
                    col,
                })
                .collect();
            keep_top(c, k)
        })
        .collect();
    let mut chosen = keep_top(partial.into_iter().flatten().collect(), k);
    chosen.sort_unstable_by_key(|c| (c.row, c.col));
    Ok(ElementOutlierSet {
        coords: chosen.iter().map(|c| (c.row, c.col)).collect(),
        values: chosen
            .iter()
            .map(|c| f16::from_f32(w_prime.get(c.row, c.col)))
            .collect(),
    })
}

/// Half-precision sparse matrix in compressed-sparse-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrixCSR {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f16>,
}

impl SparseMatrixCSR {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[u32], &[f16]) {
        let (lo, hi) = (self.row_ptr[i] as usize, self.row_ptr[i + 1] as usize);
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    /// Check the structural invariants, e.g. after decoding.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::CorruptData(format!("CSR: {m}")));
        if self.row_ptr.len() != self.rows + 1 {
            return bad(format!("row_ptr has {} entries for {} rows", self.row_ptr.len(), self.rows));
        }
        if self.row_ptr[0] != 0 || *self.row_ptr.last().unwrap() as usize != self.values.len() {
            return bad("row_ptr does not span the values".into());
        }
        if self.col_idx.len() != self.values.len() {
            return bad("col_idx and values differ in length".into());
        }
        for i in 0..self.rows {
            if self.row_ptr[i] > self.row_ptr[i + 1] {
                return bad(format!("row_ptr decreases at row {i}"));
            }
            let (cols, vals) = self.row(i);
            if cols.windows(2).any(|p| p[0] >= p[1]) {
                return bad(format!("columns of row {i} are not strictly increasing"));
            }
            if cols.last().is_some_and(|&c| c as usize >= self.cols) {
                return bad(format!("column index out of range in row {i}"));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return bad(format!("non-finite value in row {i}"));
            }
        }
        Ok(())
    }

    pub fn densify(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let (cols, vals) = self.row(i);
            let dst = m.row_mut(i);
            for (&c, v) in cols.iter().zip(vals) {
                dst[c as usize] = v.to_f32();
            }
        }
        m
    }

    /// `y += x · self` for one row vector `x` of length `rows`.
    pub fn mul_left_add(&self, x: &[f32], y: &mut [f32]) {
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(i);
            for (&c, v) in cols.iter().zip(vals) {
                y[c as usize] += xi * v.to_f32();
            }
        }
    }

    /// `f64` accumulation variant of [`Self::mul_left_add`].
    pub fn mul_left_add_f64(&self, x: &[f32], y: &mut [f64]) {
        for (i, &xi) in x.iter().enumerate() {
            let xi = xi as f64;
            let (cols, vals) = self.row(i);
            for (&c, v) in cols.iter().zip(vals) {
                y[c as usize] += xi * v.to_f64();
            }
        }
    }
}

/// Merge protected channels and protected elements into one CSR matrix.
pub fn to_csr(
    ch: &ChannelOutlierSet,
    el: &ElementOutlierSet,
    d_in: usize,
    d_out: usize,
) -> Result<SparseMatrixCSR> {
    if ch.indices.len() != ch.rows.len() || el.coords.len() != el.values.len() {
        return Err(Error::Internal("outlier set lengths disagree".into()));
    }
    let mut per_row: Vec<Vec<(u32, f16)>> = vec![Vec::new(); d_in];
    for (&i, row) in ch.indices.iter().zip(&ch.rows) {
        if i >= d_in || row.len() != d_out {
            return Err(Error::Internal(format!("protected channel {i} has wrong shape")));
        }
        per_row[i] = row.iter().enumerate().map(|(c, &v)| (c as u32, v)).collect();
    }
    let is_channel = |i: usize| ch.indices.binary_search(&i).is_ok();
    for (&(r, c), &v) in el.coords.iter().zip(&el.values) {
        if r >= d_in || c >= d_out {
            return Err(Error::Internal(format!("outlier ({r}, {c}) out of bounds")));
        }
        if is_channel(r) {
            return Err(Error::Internal(format!(
                "element outlier ({r}, {c}) lies in protected channel {r}"
            )));
        }
        per_row[r].push((c as u32, v));
    }
    let mut csr = SparseMatrixCSR::empty(d_in, d_out);
    for (i, mut entries) in per_row.into_iter().enumerate() {
        entries.sort_unstable_by_key(|e| e.0);
        if entries.windows(2).any(|p| p[0].0 == p[1].0) {
            return Err(Error::Internal(format!("duplicate outlier in row {i}")));
        }
        for (c, v) in entries {
            csr.col_idx.push(c);
            csr.values.push(v);
        }
        csr.row_ptr[i + 1] = csr.values.len() as u32;
    }
    Ok(csr)
}
