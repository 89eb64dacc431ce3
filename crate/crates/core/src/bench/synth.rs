//! Synthetic weight matrices standing in for real model layers.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::rng::Rng;
use crate::calibration::ActivationNorms;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Standard deviation of the generated weights.
pub const WEIGHT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightKind {
    Gaussian,
    Laplace,
    StudentT { nu: f64 },
    /// Channel spread grows with activation norm: the most salient channel
    /// has `sigma_ratio` times the spread of the least salient one.
    ChannelSalient { sigma_ratio: f64 },
}

impl FromStr for WeightKind {
    type Err = Error;

    /// `gaussian`, `laplace`, `student_t(<nu>)`, `channel_salient(<ratio>)`.
    fn from_str(s: &str) -> Result<Self> {
        let arg = |prefix: &str| -> Option<f64> {
            s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?.trim().parse().ok()
        };
        let kind = match s {
            "gaussian" => WeightKind::Gaussian,
            "laplace" => WeightKind::Laplace,
            _ => {
                if let Some(nu) = arg("student_t") {
                    WeightKind::StudentT { nu }
                } else if let Some(sigma_ratio) = arg("channel_salient") {
                    WeightKind::ChannelSalient { sigma_ratio }
                } else {
                    return Err(Error::Config(format!("unknown weight kind {s:?}")));
                }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl WeightKind {
    fn validate(&self) -> Result<()> {
        match *self {
            WeightKind::StudentT { nu } if !(nu > 0.0 && nu.is_finite()) => {
                Err(Error::Config(format!("student_t needs nu > 0, got {nu}")))
            }
            WeightKind::ChannelSalient { sigma_ratio } if !(sigma_ratio >= 1.0 && sigma_ratio.is_finite()) => {
                Err(Error::Config(format!("channel_salient needs a ratio >= 1, got {sigma_ratio}")))
            }
            _ => Ok(()),
        }
    }
}

/// A `d_in x d_out` weight matrix and matching activation norms, fully
/// determined by `seed`.
pub fn synth_weights(kind: WeightKind, d_in: usize, d_out: usize, seed: u64) -> Result<(Matrix, ActivationNorms)> {
    kind.validate()?;
    if d_in == 0 || d_out == 0 {
        return Err(Error::Config(format!("dimensions must be positive, got {d_in}x{d_out}")));
    }
    let root = Rng::new(seed);
    let mut wr = root.fork(1);
    let mut ar = root.fork(2);
    let spread = if matches!(kind, WeightKind::ChannelSalient { .. }) { 1.0 } else { 0.5 };
    let a: Vec<f64> = (0..d_in).map(|_| (spread * ar.normal()).exp()).collect();

    let mut row_scale = vec![WEIGHT_SCALE; d_in];
    if let WeightKind::ChannelSalient { sigma_ratio } = kind {
        let mut order: Vec<usize> = (0..d_in).collect();
        order.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(i.cmp(&j)));
        let denom = (d_in - 1).max(1) as f64;
        for (rank, &i) in order.iter().enumerate() {
            row_scale[i] = WEIGHT_SCALE * sigma_ratio.powf(rank as f64 / denom);
        }
    }
    let mut data = Vec::with_capacity(d_in * d_out);
    for &s in &row_scale {
        for _ in 0..d_out {
            let v = match kind {
                WeightKind::Gaussian | WeightKind::ChannelSalient { .. } => wr.normal(),
                WeightKind::Laplace => wr.laplace(std::f64::consts::FRAC_1_SQRT_2),
                WeightKind::StudentT { nu } => wr.student_t(nu),
            };
            data.push((s * v) as f32);
        }
    }
    Ok((Matrix::from_vec(d_in, d_out, data)?, ActivationNorms::new(a)?))
}

/// Plant large weights: `count` random positions are set to `±magnitude`
/// times their row's RMS, and the `salient` channels with the largest norms
/// get their norm multiplied by 10.
pub fn plant_outliers(
    w: &mut Matrix,
    a: &mut ActivationNorms,
    count: usize,
    magnitude: f64,
    salient: usize,
    seed: u64,
) {
    let mut r = Rng::new(seed).fork(3);
    let (d_in, d_out) = w.shape();
    let rms: Vec<f64> = w
        .iter_rows()
        .map(|row| (row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / d_out as f64).sqrt())
        .collect();
    for _ in 0..count {
        let i = r.below(d_in);
        let j = r.below(d_out);
        let sign = if r.uniform() < 0.5 { -1.0 } else { 1.0 };
        w.set(i, j, (sign * magnitude * rms[i].max(WEIGHT_SCALE)) as f32);
    }
    for &i in &crate::outlier_guard::top_channels(&a.values, salient) {
        a.values[i] *= 10.0;
    }
}

/// `m x d_in` validation inputs whose channel `i` has norm close to `a[i]`.
pub fn synth_activations(a: &ActivationNorms, m: usize, seed: u64) -> Matrix {
    let mut r = Rng::new(seed).fork(4);
    let scale = 1.0 / (m.max(1) as f64).sqrt();
    let mut data = Vec::with_capacity(m * a.len());
    for _ in 0..m {
        for &ai in &a.values {
            data.push((ai * scale * r.normal()) as f32);
        }
    }
    Matrix::from_vec(m, a.len(), data).expect("shape is consistent")
}
