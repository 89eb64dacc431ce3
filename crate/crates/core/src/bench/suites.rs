//! Named benchmark suites, sized to finish in seconds on one core.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    outlier_sweep, plant_outliers, run_comparison, BenchLayer, BenchReport, OutlierConfig,
    StrategySpec, SweepTarget, WeightKind,
};
use crate::error::{Error, Result};
use crate::quantizer::{Clusterer, DeltaVariant};

pub const SUITE_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Suite {
    /// flat 3-bit vs. 1% 2-bit / 1% 4-bit vs. activation-driven, at 3 bits.
    Preliminary,
    /// Activation-driven allocation over b = 2.0, 2.2, ..., 4.0.
    FractionalSweep,
    /// Each outlier kind alone over increasing ratios.
    OutlierSweep,
    /// Codebooks vs. grid rounding at 2, 3 and 4 bits.
    UniformVsNonuniform,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Preliminary,
        Suite::FractionalSweep,
        Suite::OutlierSweep,
        Suite::UniformVsNonuniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Preliminary => "preliminary",
            Suite::FractionalSweep => "fractional-sweep",
            Suite::OutlierSweep => "outlier-sweep",
            Suite::UniformVsNonuniform => "uniform-vs-nonuniform",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

/// Budgets 2.0, 2.2, ..., 4.0.
pub fn fractional_budgets() -> Vec<f64> {
    (0..=10).map(|i| (20 + 2 * i) as f64 / 10.0).collect()
}

fn layers(kind: WeightKind, count: u64, d_in: usize, d_out: usize, seed: u64) -> Result<Vec<BenchLayer>> {
    (0..count)
        .map(|i| BenchLayer::synthetic(kind, d_in, d_out, seed.wrapping_add(i), 64))
        .collect()
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<BenchReport> {
    match suite {
        Suite::Preliminary => {
            let l = layers(WeightKind::ChannelSalient { sigma_ratio: 4.0 }, 4, 256, 256, seed)?;
            let specs = [StrategySpec::flat(3), StrategySpec::mixed(0.01), StrategySpec::cmpq()];
            run_comparison(&l, &specs, &[3.0])
        }
        Suite::FractionalSweep => {
            let l = layers(WeightKind::ChannelSalient { sigma_ratio: 4.0 }, 4, 128, 256, seed)?;
            let spec = StrategySpec::cmpq().with_outliers(OutlierConfig::default());
            run_comparison(&l, &[spec], &fractional_budgets())
        }
        Suite::OutlierSweep => {
            let mut l = layers(WeightKind::Gaussian, 2, 1024, 256, seed)?;
            for (i, layer) in l.iter_mut().enumerate() {
                plant_outliers(&mut layer.w, &mut layer.a, 128, 20.0, 4, seed.wrapping_add(i as u64));
            }
            let ratios = [0.0, 0.001, 0.002, 0.003, 0.0045];
            let mut report = outlier_sweep(&l, &ratios, 3.0, SweepTarget::Activation, Clusterer::Lloyd)?;
            report.extend(outlier_sweep(&l, &[0.0, 0.0001, 0.0003, 0.0005], 3.0, SweepTarget::Quantization, Clusterer::Lloyd)?);
            Ok(report)
        }
        Suite::UniformVsNonuniform => {
            let l = layers(WeightKind::StudentT { nu: 3.0 }, 4, 64, 512, seed)?;
            let mut report = BenchReport::default();
            for bits in 2..=4u8 {
                let specs = [
                    StrategySpec::flat(bits),
                    StrategySpec::uniform_rtn(bits, 128, DeltaVariant::Conventional),
                    StrategySpec::uniform_rtn(bits, 128, DeltaVariant::HalfRange),
                ];
                report.extend(run_comparison(&l, &specs, &[bits as f64])?);
            }
            Ok(report)
        }
    }
}
