//! Channel-wise precision allocation.
//!
//! Every channel starts at 3 bits. Above a 3-bit budget the most salient
//! channels (largest activation norm) are promoted to 4 bits; below it the
//! least salient are demoted to 2 bits; at exactly 3 bits the bottom 1% are
//! demoted and the top 1% promoted.
//!
//! Quantiles are nearest-rank over the ascending sort of the non-excluded
//! norms: a fraction `q` of `N` channels splits the sort at
//! `r = round_half_up(q * N)`, so the low side holds exactly `r` channels and
//! the high side `N - r`. Channels tied at a split are taken in ascending
//! channel index order. Because only ranks matter, the allocation is invariant
//! under any positive scaling of the norms.

use serde::{Deserialize, Serialize};

use crate::calibration::ActivationNorms;
use crate::error::{Error, Result};

/// Average bit-width target, constrained to `[2, 4]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct BitBudget(f64);

impl BitBudget {
    pub const MIN: f64 = 2.0;
    pub const MAX: f64 = 4.0;

    pub fn new(b: f64) -> Result<Self> {
        if !(Self::MIN..=Self::MAX).contains(&b) {
            return Err(Error::Domain(format!("bit budget {b} is outside [2, 4]")));
        }
        Ok(Self(b))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Storage precision of one input channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelPrecision {
    /// Kept in half precision as an activation outlier; not quantized.
    Fp16,
    Bits2,
    Bits3,
    Bits4,
}

impl ChannelPrecision {
    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            2 => Some(Self::Bits2),
            3 => Some(Self::Bits3),
            4 => Some(Self::Bits4),
            _ => None,
        }
    }

    /// Quantized width, `None` for FP16 channels.
    pub fn bits(self) -> Option<u8> {
        match self {
            Self::Fp16 => None,
            Self::Bits2 => Some(2),
            Self::Bits3 => Some(3),
            Self::Bits4 => Some(4),
        }
    }

    /// Two-bit code used in packed precision maps.
    pub fn code(self) -> u8 {
        match self {
            Self::Fp16 => 0,
            Self::Bits2 => 1,
            Self::Bits3 => 2,
            Self::Bits4 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Fp16),
            1 => Some(Self::Bits2),
            2 => Some(Self::Bits3),
            3 => Some(Self::Bits4),
            _ => None,
        }
    }
}

/// Quantile values the allocation split at (the low split `s` and high split `l`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub low: Option<f64>,
    pub high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionMap {
    channels: Vec<ChannelPrecision>,
    pub thresholds: Thresholds,
}

impl PrecisionMap {
    pub fn new(channels: Vec<ChannelPrecision>, thresholds: Thresholds) -> Self {
        Self {
            channels,
            thresholds,
        }
    }

    /// Every channel at the same width, nothing protected.
    pub fn uniform(d_in: usize, bits: u8) -> Result<Self> {
        let p = ChannelPrecision::from_bits(bits)
            .ok_or_else(|| Error::Domain(format!("{bits}-bit channels are not supported")))?;
        Ok(Self::new(vec![p; d_in], Thresholds::default()))
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[ChannelPrecision] {
        &self.channels
    }

    pub fn get(&self, i: usize) -> ChannelPrecision {
        self.channels[i]
    }

    /// Sorted indices of FP16-protected channels.
    pub fn fp16_channels(&self) -> Vec<usize> {
        self.indices_where(|p| p == ChannelPrecision::Fp16)
    }

    /// Sorted indices of quantized channels.
    pub fn quantized_channels(&self) -> Vec<usize> {
        self.indices_where(|p| p != ChannelPrecision::Fp16)
    }

    fn indices_where(&self, f: impl Fn(ChannelPrecision) -> bool) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, &p)| f(p))
            .map(|(i, _)| i)
            .collect()
    }

    /// Channel counts as `[fp16, 2-bit, 3-bit, 4-bit]`.
    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for p in &self.channels {
            h[p.code() as usize] += 1;
        }
        h
    }
}

/// Mean bit-width over the quantized (non-FP16) channels; 0 if there are none.
pub fn nominal_avg_bits(pm: &PrecisionMap) -> f64 {
    let (sum, n) = pm
        .channels
        .iter()
        .filter_map(|p| p.bits())
        .fold((0u64, 0u64), |(s, n), b| (s + b as u64, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Allocate per-channel precisions for budget `b`. Channels in `excluded`
/// come back as [`ChannelPrecision::Fp16`] and take no part in the quantiles.
pub fn allocate(a: &ActivationNorms, budget: BitBudget, excluded: &[usize]) -> Result<PrecisionMap> {
    allocate_norms(&a.values, budget, excluded)
}

pub fn allocate_norms(a: &[f64], budget: BitBudget, excluded: &[usize]) -> Result<PrecisionMap> {
    let d_in = a.len();
    if let Some((j, v)) = a.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
        return Err(Error::Domain(format!("norm of channel {j} is {v}")));
    }
    let mut channels = vec![ChannelPrecision::Bits3; d_in];
    for &e in excluded {
        if e >= d_in {
            return Err(Error::Domain(format!(
                "excluded channel {e} out of range for {d_in} channels"
            )));
        }
        channels[e] = ChannelPrecision::Fp16;
    }
    // ascending by norm, ties by channel index (sort is stable)
    let mut ascending: Vec<usize> = (0..d_in)
        .filter(|&i| channels[i] != ChannelPrecision::Fp16)
        .collect();
    if ascending.is_empty() {
        return Err(Error::EmptyInput("every channel is excluded".into()));
    }
    ascending.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let n = ascending.len();
    let value_at = |rank: usize| a[ascending[rank.clamp(1, n) - 1]];

    let b = budget.get();
    let (n_low, n_high, thresholds) = if b <= BitBudget::MIN {
        (n, 0, Thresholds::default())
    } else if b >= BitBudget::MAX {
        (0, n, Thresholds::default())
    } else if b > 3.0 {
        let r = round_half_up((1.0 - (b - 3.0)) * n as f64).min(n);
        (0, n - r, Thresholds { low: None, high: Some(value_at(r)) })
    } else if b < 3.0 {
        let r = round_half_up((3.0 - b) * n as f64).min(n);
        (r, 0, Thresholds { low: Some(value_at(r)), high: None })
    } else {
        let r_low = round_half_up(0.01 * n as f64).min(n);
        let r_high = round_half_up(0.99 * n as f64).min(n);
        (
            r_low,
            n - r_high,
            Thresholds {
                low: Some(value_at(r_low)),
                high: Some(value_at(r_high)),
            },
        )
    };

    for &i in &ascending[..n_low] {
        channels[i] = ChannelPrecision::Bits2;
    }
    if n_high > 0 {
        // descending by norm, ties by ascending channel index
        let mut descending = ascending.clone();
        descending.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
        for &i in &descending[..n_high] {
            channels[i] = ChannelPrecision::Bits4;
        }
    }
    Ok(PrecisionMap {
        channels,
        thresholds,
    })
}
