//! End-to-end quantization of one layer and of whole tensor sets.
//!
//! Per layer the stages run in this order:
//!
//! 1. the most salient input channels are set aside in half precision;
//! 2. the remaining channels get a precision allocation;
//! 3. every remaining channel is clustered at its precision (first pass);
//! 4. the weights with the largest first-pass residuals are set aside;
//! 5. channels that lost weights in step 4 are re-clustered without them;
//! 6. codebooks, packed indices and the outlier CSR are assembled.
//!
//! Index streams stay dense: a position covered by an outlier still stores
//! the index of its nearest centroid, and reconstruction lets the outlier
//! value win.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    allocate_norms, nominal_avg_bits, round_half_up, BitBudget, ChannelPrecision, PrecisionMap,
    Thresholds,
};
use crate::calibration::ActivationNorms;
use crate::error::{Error, Result};
use crate::inference::dequantize_layer;
use crate::matrix::{Matrix, WeightMatrix};
use crate::outlier_guard::{
    extract_activation_outliers, extract_quant_outliers, to_csr, ElementOutlierSet,
    SparseMatrixCSR,
};
use crate::pack::PackedIndices;
use crate::quantizer::{
    fit_channel, quantize_with_table, ChannelCodebook, Clusterer, DeltaVariant, KMeansOptions,
};
use crate::tensor_store::{CmpqContainer, ContainerMetadata, NamedTensorSet, CONTAINER_VERSION};

pub const DEFAULT_RATIO_ACT: f64 = 0.0045;
pub const DEFAULT_RATIO_Q: f64 = 0.0005;

/// How channel precisions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AllocationPolicy {
    /// Activation-driven allocation for an average budget.
    Budget(BitBudget),
    /// Every channel at the same width.
    Flat(u8),
    /// The least salient `fraction` of channels at 2 bits, the most salient
    /// `fraction` at 4 bits, the rest at 3.
    Mixed { fraction: f64 },
}

impl AllocationPolicy {
    pub fn allocate(&self, a: &[f64], excluded: &[usize]) -> Result<PrecisionMap> {
        match *self {
            AllocationPolicy::Budget(b) => allocate_norms(a, b, excluded),
            AllocationPolicy::Flat(bits) => {
                let p = ChannelPrecision::from_bits(bits)
                    .ok_or_else(|| Error::Config(format!("flat-{bits} is not supported")))?;
                let mut channels = vec![p; a.len()];
                for &e in excluded {
                    channels[e] = ChannelPrecision::Fp16;
                }
                Ok(PrecisionMap::new(channels, Thresholds::default()))
            }
            AllocationPolicy::Mixed { fraction } => {
                if !(0.0..=0.5).contains(&fraction) {
                    return Err(Error::Config(format!("mixed fraction {fraction} outside [0, 0.5]")));
                }
                let mut channels = vec![ChannelPrecision::Bits3; a.len()];
                for &e in excluded {
                    channels[e] = ChannelPrecision::Fp16;
                }
                let mut order: Vec<usize> = (0..a.len())
                    .filter(|&i| channels[i] != ChannelPrecision::Fp16)
                    .collect();
                order.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(i.cmp(&j)));
                let n = round_half_up(fraction * order.len() as f64).min(order.len() / 2);
                for &i in &order[..n] {
                    channels[i] = ChannelPrecision::Bits2;
                }
                for &i in &order[order.len() - n..] {
                    channels[i] = ChannelPrecision::Bits4;
                }
                Ok(PrecisionMap::new(channels, Thresholds::default()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeConfig {
    pub policy: AllocationPolicy,
    pub ratio_act: f64,
    pub ratio_q: f64,
    pub kmeans: KMeansOptions,
    pub clusterer: Clusterer,
    /// Step-size denominator for the uniform round-to-nearest baseline.
    pub delta_variant: DeltaVariant,
}

impl QuantizeConfig {
    pub fn new(budget: BitBudget) -> Self {
        Self {
            policy: AllocationPolicy::Budget(budget),
            ratio_act: DEFAULT_RATIO_ACT,
            ratio_q: DEFAULT_RATIO_Q,
            kmeans: KMeansOptions::default(),
            clusterer: Clusterer::Lloyd,
            delta_variant: DeltaVariant::HalfRange,
        }
    }

    pub fn with_ratios(mut self, ratio_act: f64, ratio_q: f64) -> Self {
        self.ratio_act = ratio_act;
        self.ratio_q = ratio_q;
        self
    }

    pub fn with_clusterer(mut self, clusterer: Clusterer) -> Self {
        self.clusterer = clusterer;
        self
    }

    pub fn with_policy(mut self, policy: AllocationPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn budget(&self) -> Option<BitBudget> {
        match self.policy {
            AllocationPolicy::Budget(b) => Some(b),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| r.is_finite() && r >= 0.0;
        if !ok(self.ratio_act) || !ok(self.ratio_q) || self.ratio_act + self.ratio_q >= 1.0 {
            return Err(Error::Config(format!(
                "outlier ratios act={} q={} must be nonnegative and sum below 1",
                self.ratio_act, self.ratio_q
            )));
        }
        if self.kmeans.max_iter == 0 || !(self.kmeans.tol >= 0.0) {
            return Err(Error::Config("k-means needs max_iter >= 1 and tol >= 0".into()));
        }
        Ok(())
    }
}

/// How outlier values combine with the dense quantized streams.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MaskMode {
    /// A stored outlier replaces the quantized value at its position.
    #[default]
    Override = 0,
}

impl MaskMode {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(MaskMode::Override),
            other => Err(Error::CorruptData(format!("unknown mask mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedChannel {
    pub codebook: ChannelCodebook,
    pub indices: PackedIndices,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub recon_mse: f64,
    pub nominal_bits: f64,
    pub effective_bits: f64,
}

/// A quantized weight matrix: one codebook and index stream per quantized
/// channel (ascending channel order) plus the half-precision outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub precision: PrecisionMap,
    pub channels: Vec<QuantizedChannel>,
    pub outliers: SparseMatrixCSR,
    pub mask: MaskMode,
    pub stats: LayerStats,
}

impl QuantizedLayer {
    /// Check cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::CorruptData(format!("layer {:?}: {m}", self.name)));
        if self.precision.len() != self.d_in {
            return bad(format!("precision map covers {} of {} channels", self.precision.len(), self.d_in));
        }
        if self.outliers.rows != self.d_in || self.outliers.cols != self.d_out {
            return bad("outlier matrix has the wrong shape".into());
        }
        let quantized = self.precision.quantized_channels();
        if quantized.len() != self.channels.len() {
            return bad(format!(
                "{} quantized channels but {} codebooks",
                quantized.len(),
                self.channels.len()
            ));
        }
        for (&i, ch) in quantized.iter().zip(&self.channels) {
            let bits = self.precision.get(i).bits().unwrap();
            if ch.indices.bits() != bits || ch.indices.len() != self.d_out {
                return bad(format!("channel {i} stream does not match {bits} bits x {}", self.d_out));
            }
            if ch.codebook.len() > 1 << bits {
                return bad(format!("channel {i} codebook too large"));
            }
            if ch.indices.unpack().iter().any(|&x| x as usize >= ch.codebook.len()) {
                return bad(format!("channel {i} has an index past its codebook"));
            }
        }
        for i in self.precision.fp16_channels() {
            let (cols, _) = self.outliers.row(i);
            if cols.len() != self.d_out {
                return bad(format!("protected channel {i} is not fully stored"));
            }
        }
        Ok(())
    }

    /// Quantized channel index -> position in `channels`.
    pub fn channel_slots(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.precision
            .channels()
            .iter()
            .map(|p| {
                p.bits().map(|_| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }

    pub fn element_outlier_count(&self) -> usize {
        let fp16 = self.precision.fp16_channels().len();
        self.outliers.nnz() - fp16 * self.d_out
    }
}

/// Total storage bits of a layer with the given precision map and `nnz`
/// outliers: index streams, codebooks (optional), outlier values, CSR
/// indices and row pointers, and the 2-bit precision map.
pub fn storage_bits(precision: &PrecisionMap, d_out: usize, nnz: usize, codebooks: bool) -> u64 {
    let d_in = precision.len() as u64;
    let mut bits = 0u64;
    for p in precision.channels() {
        if let Some(b) = p.bits() {
            bits += b as u64 * d_out as u64;
            if codebooks {
                bits += 16 * (1u64 << b);
            }
        }
    }
    let nnz = nnz as u64;
    bits + 16 * nnz + 32 * (nnz + d_in + 1) + 2 * d_in
}

/// Stored bits per weight, everything included.
pub fn effective_bits(layer: &QuantizedLayer) -> f64 {
    storage_bits(&layer.precision, layer.d_out, layer.outliers.nnz(), true) as f64
        / (layer.d_in * layer.d_out) as f64
}

/// Bits per weight of a uniform round-to-nearest layer: no codebooks, but a
/// half-precision step and minimum for every group.
pub fn rtn_effective_bits(precision: &PrecisionMap, d_out: usize, nnz: usize, group_size: usize) -> f64 {
    let groups = precision.quantized_channels().len() as u64 * d_out.div_ceil(group_size) as u64;
    (storage_bits(precision, d_out, nnz, false) + 32 * groups) as f64
        / (precision.len() * d_out) as f64
}

fn quantize_row(values: &[f32], bits: u8, cfg: &QuantizeConfig) -> Result<ChannelCodebook> {
    if values.is_empty() {
        return ChannelCodebook::from_f32(&[0.0]);
    }
    fit_channel(values, 1 << bits, cfg.clusterer, &cfg.kmeans)?.codebook()
}

/// Quantize one `d_in x d_out` weight matrix.
pub fn quantize_layer(
    name: &str,
    w: &WeightMatrix,
    a: &ActivationNorms,
    cfg: &QuantizeConfig,
) -> Result<QuantizedLayer> {
    cfg.validate()?;
    let (d_in, d_out) = w.shape();
    if a.len() != d_in {
        return Err(Error::Shape(format!(
            "layer {name:?}: {} activation norms for {d_in} input channels",
            a.len()
        )));
    }
    if d_in == 0 || d_out == 0 {
        return Err(Error::EmptyInput(format!("layer {name:?} has no weights")));
    }
    if !w.is_finite() {
        return Err(Error::Numeric(format!("layer {name:?} has non-finite weights")));
    }

    let (w_prime, channel_outliers) = extract_activation_outliers(w, a, cfg.ratio_act)?;
    let precision = cfg.policy.allocate(&a.values, &channel_outliers.indices)?;
    let quantized = precision.quantized_channels();

    let first_pass: Vec<ChannelCodebook> = quantized
        .par_iter()
        .map(|&i| quantize_row(w_prime.row(i), precision.get(i).bits().unwrap(), cfg))
        .collect::<Result<_>>()?;
    let mut codebooks = first_pass;

    let element_outliers = if cfg.ratio_q > 0.0 {
        let mut w_q = Matrix::zeros(d_in, d_out);
        for (&i, cb) in quantized.iter().zip(&codebooks) {
            let table = cb.to_f32();
            let idx = quantize_with_table(w_prime.row(i), &table)?;
            for (dst, &j) in w_q.row_mut(i).iter_mut().zip(&idx) {
                *dst = table[j as usize];
            }
        }
        let el = extract_quant_outliers(&w_prime, &w_q, cfg.ratio_q, &channel_outliers.indices)?;

        let mut removed: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(r, c) in &el.coords {
            removed.entry(r).or_default().push(c);
        }
        let slot: BTreeMap<usize, usize> = quantized.iter().enumerate().map(|(s, &i)| (i, s)).collect();
        let refits: Vec<(usize, ChannelCodebook)> = removed
            .par_iter()
            .map(|(&row, cols)| {
                let mut keep = vec![true; d_out];
                for &c in cols {
                    keep[c] = false;
                }
                let rest: Vec<f32> = w_prime
                    .row(row)
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| v)
                    .collect();
                let cb = quantize_row(&rest, precision.get(row).bits().unwrap(), cfg)?;
                Ok((slot[&row], cb))
            })
            .collect::<Result<_>>()?;
        for (s, cb) in refits {
            codebooks[s] = cb;
        }
        el
    } else {
        ElementOutlierSet::default()
    };

    let outliers = to_csr(&channel_outliers, &element_outliers, d_in, d_out)?;
    let channels: Vec<QuantizedChannel> = quantized
        .par_iter()
        .zip(codebooks)
        .map(|(&i, codebook)| {
            let idx = quantize_with_table(w_prime.row(i), &codebook.to_f32())?;
            let indices = PackedIndices::pack(&idx, precision.get(i).bits().unwrap())?;
            Ok(QuantizedChannel { codebook, indices })
        })
        .collect::<Result<_>>()?;

    let mut layer = QuantizedLayer {
        name: name.to_string(),
        d_in,
        d_out,
        precision,
        channels,
        outliers,
        mask: MaskMode::Override,
        stats: LayerStats::default(),
    };
    let recon = dequantize_layer(&layer)?;
    let sse: f64 = w
        .as_slice()
        .iter()
        .zip(recon.as_slice())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    layer.stats = LayerStats {
        recon_mse: sse / (d_in * d_out) as f64,
        nominal_bits: nominal_avg_bits(&layer.precision),
        effective_bits: effective_bits(&layer),
    };
    Ok(layer)
}

/// Layer name for a weight tensor: the tensor name without a `.weight` suffix.
pub fn layer_name(tensor_name: &str) -> &str {
    tensor_name.strip_suffix(".weight").unwrap_or(tensor_name)
}

/// Quantize every 2-D tensor of `weights`, in name order. `norms` is keyed
/// by layer name (see [`layer_name`]).
pub fn quantize_model(
    weights: &NamedTensorSet,
    norms: &BTreeMap<String, ActivationNorms>,
    cfg: &QuantizeConfig,
) -> Result<CmpqContainer> {
    cfg.validate()?;
    let mut layers = Vec::new();
    for (tensor, entry) in weights.iter() {
        if entry.shape.len() != 2 {
            continue;
        }
        let name = layer_name(tensor);
        let a = norms
            .get(name)
            .ok_or_else(|| Error::Config(format!("no activation norms for layer {name:?}")))?;
        let w = entry.to_matrix()?;
        layers.push(quantize_layer(name, &w, a, cfg)?);
    }
    if layers.is_empty() {
        return Err(Error::EmptyInput("no 2-D weight tensors to quantize".into()));
    }
    let mut extra = BTreeMap::new();
    extra.insert(
        "clusterer".to_string(),
        serde_json::to_value(cfg.clusterer).expect("enum serializes"),
    );
    extra.insert(
        "kmeans".to_string(),
        serde_json::to_value(cfg.kmeans).expect("struct serializes"),
    );
    extra.insert(
        "policy".to_string(),
        serde_json::to_value(cfg.policy).expect("enum serializes"),
    );
    Ok(CmpqContainer {
        version: CONTAINER_VERSION,
        metadata: ContainerMetadata {
            bit_budget: cfg.budget().map(BitBudget::get),
            ratio_act: cfg.ratio_act,
            ratio_q: cfg.ratio_q,
            extra,
            ..ContainerMetadata::default()
        },
        layers,
    })
}
