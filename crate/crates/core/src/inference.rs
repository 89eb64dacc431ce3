//! Reference forward path.
//!
//! The quantized part of a layer is split into one sub-matrix per bit-width;
//! each is multiplied with the matching slice of the input and the sparse
//! outliers are added on top:
//!
//! ```text
//! y = x_2 · W_2 + x_3 · W_3 + x_4 · W_4 + x · O
//! ```
//!
//! Positions held by an outlier are zero in the group sub-matrices so the
//! sum equals `x · dequantize_layer(layer)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pipeline::QuantizedLayer;

/// All quantized channels of one bit-width, decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionGroup {
    pub bits: u8,
    /// Ascending input-channel indices.
    pub channels: Vec<usize>,
    /// `channels.len() x d_out` decoded weights, outlier positions zeroed.
    pub weights: Matrix,
}

/// Decode the quantized channels grouped by bit-width (2, 3, 4), skipping
/// empty groups.
pub fn precision_groups(layer: &QuantizedLayer) -> Result<Vec<PrecisionGroup>> {
    let slots = layer.channel_slots();
    let mut groups = Vec::new();
    for bits in 2..=4u8 {
        let channels: Vec<usize> = (0..layer.d_in)
            .filter(|&i| layer.precision.get(i).bits() == Some(bits))
            .collect();
        if channels.is_empty() {
            continue;
        }
        let mut weights = Matrix::zeros(channels.len(), layer.d_out);
        for (r, &i) in channels.iter().enumerate() {
            let slot = slots[i].expect("quantized channel has a slot");
            decode_channel(layer, i, slot, weights.row_mut(r))?;
            let (cols, _) = layer.outliers.row(i);
            let dst = weights.row_mut(r);
            for &c in cols {
                dst[c as usize] = 0.0;
            }
        }
        groups.push(PrecisionGroup {
            bits,
            channels,
            weights,
        });
    }
    Ok(groups)
}

fn decode_channel(layer: &QuantizedLayer, i: usize, slot: usize, dst: &mut [f32]) -> Result<()> {
    let ch = layer.channels.get(slot).ok_or_else(|| {
        Error::CorruptData(format!("layer {:?}: no codebook for channel {i}", layer.name))
    })?;
    if ch.indices.len() != dst.len() {
        return Err(Error::CorruptData(format!(
            "layer {:?}: channel {i} has {} indices for {} outputs",
            layer.name,
            ch.indices.len(),
            dst.len()
        )));
    }
    let table = ch.codebook.to_f32();
    for (d, idx) in dst.iter_mut().zip(ch.indices.unpack()) {
        *d = *table.get(idx as usize).ok_or_else(|| {
            Error::CorruptData(format!(
                "layer {:?}: channel {i} index {idx} past {} centroids",
                layer.name,
                table.len()
            ))
        })?;
    }
    Ok(())
}

/// Dense `d_in x d_out` reconstruction `W_q + O`.
pub fn dequantize_layer(layer: &QuantizedLayer) -> Result<Matrix> {
    if layer.precision.len() != layer.d_in
        || layer.outliers.rows != layer.d_in
        || layer.outliers.cols != layer.d_out
    {
        return Err(Error::CorruptData(format!(
            "layer {:?}: parts disagree on the {}x{} shape",
            layer.name, layer.d_in, layer.d_out
        )));
    }
    let mut w = Matrix::zeros(layer.d_in, layer.d_out);
    for (i, slot) in layer.channel_slots().into_iter().enumerate() {
        if let Some(slot) = slot {
            decode_channel(layer, i, slot, w.row_mut(i))?;
        }
    }
    for i in 0..layer.d_in {
        let (cols, vals) = layer.outliers.row(i);
        let dst = w.row_mut(i);
        for (&c, v) in cols.iter().zip(vals) {
            dst[c as usize] = v.to_f32();
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Accumulation {
    #[default]
    F32,
    /// Each group is summed into its own `f64` buffer and the buffers are
    /// merged in a fixed order, so the result does not depend on the order
    /// the groups were processed in.
    F64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub accumulate: Accumulation,
    /// Processing order of the bit-widths; defaults to 2, 3, 4.
    pub group_order: Option<Vec<u8>>,
}

/// `x · Ŵ` for an `n x d_in` input.
pub fn forward(layer: &QuantizedLayer, x: &Matrix) -> Result<Matrix> {
    forward_with(layer, x, &ForwardOptions::default())
}

/// `x · Ŵ` for a single input vector.
pub fn forward_vec(layer: &QuantizedLayer, x: &[f32]) -> Result<Vec<f32>> {
    let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(forward(layer, &m)?.into_vec())
}

pub fn forward_with(layer: &QuantizedLayer, x: &Matrix, opts: &ForwardOptions) -> Result<Matrix> {
    if x.cols() != layer.d_in {
        return Err(Error::Shape(format!(
            "input has width {}, layer {:?} expects {}",
            x.cols(),
            layer.name,
            layer.d_in
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite input".into()));
    }
    let mut groups = precision_groups(layer)?;
    if let Some(order) = &opts.group_order {
        groups.sort_by_key(|g| order.iter().position(|&b| b == g.bits).unwrap_or(usize::MAX));
    }
    let d_out = layer.d_out;
    let mut y = Matrix::zeros(x.rows(), d_out);
    if d_out == 0 {
        return Ok(y);
    }
    y.as_mut_slice()
        .par_chunks_mut(d_out)
        .zip(x.as_slice().par_chunks(layer.d_in.max(1)))
        .for_each(|(out, xr)| match opts.accumulate {
            Accumulation::F32 => {
                // Kahan-compensated; plain f32 sums drift past 1e-5 on long
                // rows with cancellation
                let mut comp = vec![0.0f32; d_out];
                for g in &groups {
                    for (r, &i) in g.channels.iter().enumerate() {
                        let xi = xr[i];
                        if xi == 0.0 {
                            continue;
                        }
                        for ((o, c), &w) in out.iter_mut().zip(comp.iter_mut()).zip(g.weights.row(r)) {
                            let t = xi * w - *c;
                            let s = *o + t;
                            *c = (s - *o) - t;
                            *o = s;
                        }
                    }
                }
                for (o, c) in out.iter_mut().zip(&comp) {
                    *o -= c;
                }
                layer.outliers.mul_left_add(xr, out);
            }
            Accumulation::F64 => {
                // slot 0..3 for 2..4 bits, slot 3 for the outliers
                let mut parts = vec![vec![0.0f64; d_out]; 4];
                for g in &groups {
                    let acc = &mut parts[(g.bits - 2) as usize];
                    for (r, &i) in g.channels.iter().enumerate() {
                        let xi = xr[i] as f64;
                        for (o, &w) in acc.iter_mut().zip(g.weights.row(r)) {
                            *o += xi * w as f64;
                        }
                    }
                }
                layer.outliers.mul_left_add_f64(xr, &mut parts[3]);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = (parts[0][j] + parts[1][j] + parts[2][j] + parts[3][j]) as f32;
                }
            }
        });
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::BitBudget;
    use crate::calibration::ActivationNorms;
    use crate::pipeline::{quantize_layer, QuantizeConfig};

    fn rng(seed: u64) -> impl FnMut() -> f32 {
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        }
    }

    fn layer(d_in: usize, d_out: usize, b: f64, ratios: (f64, f64), seed: u64) -> (Matrix, QuantizedLayer) {
        let mut next = rng(seed);
        let w = Matrix::from_vec(d_in, d_out, (0..d_in * d_out).map(|_| next()).collect()).unwrap();
        let a = ActivationNorms::new((0..d_in).map(|_| next().abs() as f64 + 0.1).collect()).unwrap();
        let cfg = QuantizeConfig::new(BitBudget::new(b).unwrap()).with_ratios(ratios.0, ratios.1);
        let q = quantize_layer("t", &w, &a, &cfg).unwrap();
        (w, q)
    }

    /// Scatter-gather reconstruction written independently of the groups.
    fn naive_dequant(q: &QuantizedLayer) -> Matrix {
        let dense_o = q.outliers.densify();
        let mut m = Matrix::zeros(q.d_in, q.d_out);
        let mut slot = 0;
        for i in 0..q.d_in {
            if q.precision.get(i).bits().is_some() {
                let ch = &q.channels[slot];
                slot += 1;
                for j in 0..q.d_out {
                    m.set(i, j, ch.codebook.centroids()[ch.indices.get(j) as usize].to_f32());
                }
            }
            let (cols, _) = q.outliers.row(i);
            for &c in cols {
                m.set(i, c as usize, dense_o.get(i, c as usize));
            }
        }
        m
    }

    #[test]
    fn lossless_layer_recovers_weights() {
        let vals = [-1.0f32, -0.5, 0.25, 2.0];
        let w = Matrix::from_vec(3, 8, (0..24).map(|k| vals[k % 4]).collect()).unwrap();
        let a = ActivationNorms::new(vec![1.0, 2.0, 3.0]).unwrap();
        let cfg = QuantizeConfig::new(BitBudget::new(2.0).unwrap()).with_ratios(0.0, 0.0);
        let q = quantize_layer("t", &w, &a, &cfg).unwrap();
        assert_eq!(dequantize_layer(&q).unwrap(), w);
        let x = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let y = forward(&q, &x).unwrap();
        let want = x.matmul_f64(&w).unwrap();
        for (a, b) in y.as_slice().iter().zip(&want) {
            assert!((*a as f64 - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn protected_channel_is_exact() {
        let (w, q) = layer(10, 16, 3.0, (0.1, 0.0), 1);
        let fp16 = q.precision.fp16_channels();
        assert_eq!(fp16.len(), 1);
        let r = dequantize_layer(&q).unwrap();
        let i = fp16[0];
        for j in 0..16 {
            assert_eq!(r.get(i, j), half::f16::from_f32(w.get(i, j)).to_f32());
        }
    }

    #[test]
    fn matches_naive_reconstruction() {
        for seed in 0..10 {
            let (_, q) = layer(24, 20, 2.6, (0.05, 0.01), seed);
            assert_eq!(dequantize_layer(&q).unwrap(), naive_dequant(&q));
        }
    }

    #[test]
    fn zero_input_gives_zero() {
        let (_, q) = layer(16, 8, 3.0, (0.0625, 0.01), 2);
        let y = forward(&q, &Matrix::zeros(3, 16)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_dense_oracle() {
        for seed in 0..20 {
            let (_, q) = layer(16, 8, 2.0 + seed as f64 * 0.1, (0.0625, 0.01), seed);
            let mut next = rng(seed + 100);
            let x = Matrix::from_vec(4, 16, (0..64).map(|_| next()).collect()).unwrap();
            let y = forward(&q, &x).unwrap();
            let want = x.matmul_f64(&dequantize_layer(&q).unwrap()).unwrap();
            for (a, b) in y.as_slice().iter().zip(&want) {
                assert!((*a as f64 - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn f64_accumulation_is_order_independent() {
        let (_, q) = layer(40, 12, 3.0, (0.05, 0.01), 3);
        let mut next = rng(7);
        let x = Matrix::from_vec(2, 40, (0..80).map(|_| next()).collect()).unwrap();
        let base = ForwardOptions {
            accumulate: Accumulation::F64,
            group_order: None,
        };
        let y0 = forward_with(&q, &x, &base).unwrap();
        for order in [vec![4, 3, 2], vec![3, 2, 4], vec![2, 4, 3]] {
            let opts = ForwardOptions {
                group_order: Some(order),
                ..base.clone()
            };
            assert_eq!(forward_with(&q, &x, &opts).unwrap(), y0);
        }
    }

    #[test]
    fn shape_mismatch() {
        let (_, q) = layer(8, 4, 3.0, (0.0, 0.0), 4);
        assert!(matches!(forward(&q, &Matrix::zeros(1, 7)), Err(Error::Shape(_))));
        assert!(matches!(forward_vec(&q, &[0.0; 9]), Err(Error::Shape(_))));
    }

    #[test]
    fn corrupt_index_is_reported() {
        let (_, mut q) = layer(4, 8, 2.0, (0.0, 0.0), 5);
        q.channels[0].codebook = crate::quantizer::ChannelCodebook::from_f32(&[0.0]).unwrap();
        let has_nonzero = q.channels[0].indices.unpack().iter().any(|&i| i > 0);
        if has_nonzero {
            assert!(matches!(dequantize_layer(&q), Err(Error::CorruptData(_))));
        }
    }
}
