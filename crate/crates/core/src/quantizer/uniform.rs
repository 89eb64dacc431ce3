//! Uniform round-to-nearest quantization, the grid baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Denominator of the step size `Δ = (max - min) / denom`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeltaVariant {
    /// `2^(N-1) - 1`: only `2^(N-1)` levels are reachable.
    #[default]
    HalfRange,
    /// `2^N - 1`: the full code space.
    Conventional,
}

impl DeltaVariant {
    pub fn denominator(self, bits: u8) -> u32 {
        match self {
            DeltaVariant::HalfRange => (1u32 << (bits - 1)) - 1,
            DeltaVariant::Conventional => (1u32 << bits) - 1,
        }
    }
}

impl std::str::FromStr for DeltaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half-range" => Ok(Self::HalfRange),
            "conventional" => Ok(Self::Conventional),
            other => Err(Error::Config(format!(
                "unknown delta variant {other:?} (expected half-range or conventional)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformQuantParams {
    /// Step size; 0 for a constant group.
    pub delta: f64,
    pub w_min: f64,
    pub bits: u8,
    pub group_size: usize,
    pub variant: DeltaVariant,
}

/// Quantize one group to `bits`-bit grid indices.
pub fn uniform_quantize(
    w: &[f32],
    bits: u8,
    variant: DeltaVariant,
) -> Result<(UniformQuantParams, Vec<u8>)> {
    if !(2..=4).contains(&bits) {
        return Err(Error::Domain(format!("uniform quantization supports 2..=4 bits, got {bits}")));
    }
    if w.is_empty() {
        return Err(Error::EmptyInput("empty quantization group".into()));
    }
    if let Some(bad) = w.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite weight {bad}")));
    }
    let (lo, hi) = w
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let denom = variant.denominator(bits);
    let delta = (hi - lo) / denom as f64;
    let params = UniformQuantParams {
        delta,
        w_min: lo,
        bits,
        group_size: w.len(),
        variant,
    };
    if delta == 0.0 {
        return Ok((params, vec![0; w.len()]));
    }
    let idx = w
        .iter()
        .map(|&v| ((v as f64 - lo) / delta).round().clamp(0.0, denom as f64) as u8)
        .collect();
    Ok((params, idx))
}

pub fn uniform_dequantize(params: &UniformQuantParams, idx: &[u8]) -> Vec<f32> {
    idx.iter()
        .map(|&i| (params.w_min + i as f64 * params.delta) as f32)
        .collect()
}

/// Round-to-nearest reconstruction of a whole matrix, grouping `group_size`
/// consecutive weights within each row (input channel).
pub fn rtn_matrix(w: &Matrix, bits: u8, group_size: usize, variant: DeltaVariant) -> Result<Matrix> {
    if group_size == 0 {
        return Err(Error::Config("group size must be positive".into()));
    }
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        for (src, dst) in w.row(i).chunks(group_size).zip(out.row_mut(i).chunks_mut(group_size)) {
            let (p, idx) = uniform_quantize(src, bits, variant)?;
            dst.copy_from_slice(&uniform_dequantize(&p, &idx));
        }
    }
    Ok(out)
}
