//! Strategy comparisons and sweeps over synthetic layers.

pub mod rng;
pub mod suites;
pub mod synth;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{nominal_avg_bits, BitBudget};
use crate::calibration::ActivationNorms;
use crate::error::{Error, Result};
use crate::inference::dequantize_layer;
use crate::matrix::Matrix;
use crate::metrics::{output_error_parts, recon_error};
use crate::outlier_guard::{extract_activation_outliers, extract_quant_outliers, to_csr};
use crate::pipeline::{
    quantize_layer, rtn_effective_bits, AllocationPolicy, QuantizeConfig, DEFAULT_RATIO_ACT,
    DEFAULT_RATIO_Q,
};
use crate::quantizer::{rtn_matrix, Clusterer, DeltaVariant};

pub use rng::Rng;
pub use suites::{run_suite, Suite};
pub use synth::{plant_outliers, synth_activations, synth_weights, WeightKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierConfig {
    pub ratio_act: f64,
    pub ratio_q: f64,
}

impl OutlierConfig {
    pub const NONE: OutlierConfig = OutlierConfig {
        ratio_act: 0.0,
        ratio_q: 0.0,
    };
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            ratio_act: DEFAULT_RATIO_ACT,
            ratio_q: DEFAULT_RATIO_Q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    /// Every channel at `N` bits; only valid for budget `N`.
    Flat(u8),
    /// Activation-driven allocation at the grid budget.
    Cmpq,
    /// `fraction` of channels at 2 and at 4 bits, the rest at 3; budget 3.
    Mixed { fraction: f64 },
    /// Grid round-to-nearest at `bits`; only valid for budget `bits`.
    UniformRtn {
        bits: u8,
        group_size: usize,
        variant: DeltaVariant,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub name: String,
    pub strategy: Strategy,
    pub outliers: OutlierConfig,
    pub clusterer: Clusterer,
}

impl StrategySpec {
    fn new(name: String, strategy: Strategy) -> Self {
        Self {
            name,
            strategy,
            outliers: OutlierConfig::NONE,
            clusterer: Clusterer::Lloyd,
        }
    }

    pub fn flat(bits: u8) -> Self {
        Self::new(format!("flat-{bits}"), Strategy::Flat(bits))
    }

    pub fn cmpq() -> Self {
        Self::new("cmpq".into(), Strategy::Cmpq)
    }

    pub fn mixed(fraction: f64) -> Self {
        Self::new(format!("mixed-{}%", fraction * 100.0), Strategy::Mixed { fraction })
    }

    pub fn uniform_rtn(bits: u8, group_size: usize, variant: DeltaVariant) -> Self {
        let v = match variant {
            DeltaVariant::HalfRange => "half-range",
            DeltaVariant::Conventional => "conventional",
        };
        Self::new(
            format!("rtn-{bits}-g{group_size}-{v}"),
            Strategy::UniformRtn {
                bits,
                group_size,
                variant,
            },
        )
    }

    pub fn with_outliers(mut self, outliers: OutlierConfig) -> Self {
        self.outliers = outliers;
        self
    }

    pub fn with_clusterer(mut self, clusterer: Clusterer) -> Self {
        self.clusterer = clusterer;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Check that this strategy can run at budget `b`.
    pub fn check_budget(&self, b: f64) -> Result<()> {
        let fixed = match self.strategy {
            Strategy::Cmpq => return BitBudget::new(b).map(|_| ()).map_err(|e| Error::Config(e.to_string())),
            Strategy::Flat(n) | Strategy::UniformRtn { bits: n, .. } => {
                if !(2..=4).contains(&n) {
                    return Err(Error::Config(format!("{}: {n} bits is not supported", self.name)));
                }
                n as f64
            }
            Strategy::Mixed { fraction } => {
                if !(0.0..=0.5).contains(&fraction) {
                    return Err(Error::Config(format!("{}: fraction {fraction} outside [0, 0.5]", self.name)));
                }
                3.0
            }
        };
        if let Strategy::UniformRtn { group_size: 0, .. } = self.strategy {
            return Err(Error::Config(format!("{}: group size must be positive", self.name)));
        }
        if b != fixed {
            return Err(Error::Config(format!(
                "strategy {} has a fixed width of {fixed} bits and cannot run at b = {b}",
                self.name
            )));
        }
        Ok(())
    }
}

/// One synthetic (or loaded) layer to evaluate on.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchLayer {
    pub name: String,
    pub w: Matrix,
    pub a: ActivationNorms,
    /// Validation inputs for the output error; `None` skips it.
    pub x_val: Option<Matrix>,
}

impl BenchLayer {
    pub fn synthetic(kind: WeightKind, d_in: usize, d_out: usize, seed: u64, val_rows: usize) -> Result<Self> {
        let (w, a) = synth_weights(kind, d_in, d_out, seed)?;
        let x_val = (val_rows > 0).then(|| synth_activations(&a, val_rows, seed));
        Ok(Self {
            name: format!("synthetic-{seed}"),
            w,
            a,
            x_val,
        })
    }
}

/// Metrics of one strategy on one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub b_nominal: f64,
    pub b_effective: f64,
    pub sse: f64,
    pub recon_mse: f64,
    pub frobenius_rel: f64,
    /// Squared norms of `X (W - Ŵ)` and `X W`; zero without validation inputs.
    pub out_err_sq: f64,
    pub out_ref_sq: f64,
}

impl Evaluation {
    pub fn output_rel_err(&self) -> f64 {
        if self.out_ref_sq > 0.0 {
            (self.out_err_sq / self.out_ref_sq).sqrt()
        } else {
            self.out_err_sq.sqrt()
        }
    }
}

/// Reconstruction of `layer.w` under `spec` at budget `b`, with nominal and
/// effective bits.
pub fn reconstruct(layer: &BenchLayer, spec: &StrategySpec, b: f64) -> Result<(Matrix, f64, f64)> {
    spec.check_budget(b)?;
    let policy = match spec.strategy {
        Strategy::Flat(n) => AllocationPolicy::Flat(n),
        Strategy::Cmpq => AllocationPolicy::Budget(BitBudget::new(b)?),
        Strategy::Mixed { fraction } => AllocationPolicy::Mixed { fraction },
        Strategy::UniformRtn {
            bits,
            group_size,
            variant,
        } => return reconstruct_rtn(layer, spec.outliers, bits, group_size, variant),
    };
    let cfg = QuantizeConfig::new(BitBudget::new(b)?)
        .with_policy(policy)
        .with_ratios(spec.outliers.ratio_act, spec.outliers.ratio_q)
        .with_clusterer(spec.clusterer);
    let q = quantize_layer(&layer.name, &layer.w, &layer.a, &cfg)?;
    Ok((dequantize_layer(&q)?, q.stats.nominal_bits, q.stats.effective_bits))
}

/// Grid baseline with the same outlier handling as the codebook pipeline:
/// protected channels are set aside, the rest is rounded group-wise, and the
/// largest residuals are stored exactly.
fn reconstruct_rtn(
    layer: &BenchLayer,
    outliers: OutlierConfig,
    bits: u8,
    group_size: usize,
    variant: DeltaVariant,
) -> Result<(Matrix, f64, f64)> {
    let (d_in, d_out) = layer.w.shape();
    let (w_prime, ch) = extract_activation_outliers(&layer.w, &layer.a, outliers.ratio_act)?;
    let precision = AllocationPolicy::Flat(bits).allocate(&layer.a.values, &ch.indices)?;
    let mut recon = rtn_matrix(&w_prime, bits, group_size, variant)?;
    for &i in &ch.indices {
        recon.row_mut(i).fill(0.0);
    }
    let el = extract_quant_outliers(&w_prime, &recon, outliers.ratio_q, &ch.indices)?;
    let csr = to_csr(&ch, &el, d_in, d_out)?;
    for i in 0..d_in {
        let (cols, vals) = csr.row(i);
        let dst = recon.row_mut(i);
        for (&c, v) in cols.iter().zip(vals) {
            dst[c as usize] = v.to_f32();
        }
    }
    let nominal = nominal_avg_bits(&precision);
    let effective = rtn_effective_bits(&precision, d_out, csr.nnz(), group_size);
    Ok((recon, nominal, effective))
}

pub fn evaluate(layer: &BenchLayer, spec: &StrategySpec, b: f64) -> Result<Evaluation> {
    let (w_hat, b_nominal, b_effective) = reconstruct(layer, spec, b)?;
    let r = recon_error(&layer.w, &w_hat)?;
    let (out_err_sq, out_ref_sq) = match &layer.x_val {
        Some(x) => output_error_parts(&layer.w, &w_hat, x)?,
        None => (0.0, 0.0),
    };
    Ok(Evaluation {
        b_nominal,
        b_effective,
        sse: r.sse,
        recon_mse: r.mse,
        frobenius_rel: r.frobenius_rel,
        out_err_sq,
        out_ref_sq,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: String,
    pub budget: f64,
    pub b_nominal: f64,
    pub b_effective: f64,
    pub recon_mse: f64,
    pub output_rel_err: f64,
    /// Seconds.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn extend(&mut self, other: BenchReport) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["strategy", "budget", "b_nominal", "b_effective", "recon_mse", "output_rel_err", "wall_time"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(&[
                r.strategy.clone(),
                r.budget.to_string(),
                r.b_nominal.to_string(),
                r.b_effective.to_string(),
                r.recon_mse.to_string(),
                r.output_rel_err.to_string(),
                format!("{:.6}", r.wall_time),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.rows).map_err(|e| Error::Internal(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Internal(format!("csv: {e}"))
}

/// Aggregate evaluations over layers: weight-count-weighted bits, pooled
/// squared errors.
fn aggregate(layers: &[BenchLayer], evals: &[Evaluation]) -> (f64, f64, f64, f64) {
    let mut total = 0.0;
    let (mut nom, mut eff, mut sse, mut err, mut refn) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (l, e) in layers.iter().zip(evals) {
        let n = (l.w.rows() * l.w.cols()) as f64;
        total += n;
        nom += e.b_nominal * n;
        eff += e.b_effective * n;
        sse += e.sse;
        err += e.out_err_sq;
        refn += e.out_ref_sq;
    }
    let out = if refn > 0.0 { (err / refn).sqrt() } else { err.sqrt() };
    (nom / total, eff / total, sse / total, out)
}

/// Evaluate every (strategy, budget) pair over all layers. Rows come out in
/// strategy-major order regardless of scheduling.
pub fn run_comparison(layers: &[BenchLayer], strategies: &[StrategySpec], budgets: &[f64]) -> Result<BenchReport> {
    if strategies.is_empty() {
        return Err(Error::Config("no strategies to compare".into()));
    }
    if budgets.is_empty() || layers.is_empty() {
        return Err(Error::Config("comparison needs at least one budget and one layer".into()));
    }
    let grid: Vec<(&StrategySpec, f64)> = strategies
        .iter()
        .flat_map(|s| budgets.iter().map(move |&b| (s, b)))
        .collect();
    for (s, b) in &grid {
        s.check_budget(*b)?;
    }
    let rows = grid
        .par_iter()
        .map(|&(spec, b)| {
            let start = Instant::now();
            let evals: Vec<Evaluation> = layers.iter().map(|l| evaluate(l, spec, b)).collect::<Result<_>>()?;
            let (b_nominal, b_effective, recon_mse, output_rel_err) = aggregate(layers, &evals);
            Ok(BenchRow {
                strategy: spec.name.clone(),
                budget: b,
                b_nominal,
                b_effective,
                recon_mse,
                output_rel_err,
                wall_time: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport { rows })
}

/// Which outlier kind an [`outlier_sweep`] varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepTarget {
    Activation,
    Quantization,
}

pub const MAX_SWEEP_RATIO: f64 = 0.005;

/// cmpq at budget `b` with one outlier ratio swept and the other at 0.
pub fn outlier_sweep(
    layers: &[BenchLayer],
    ratios: &[f64],
    b: f64,
    target: SweepTarget,
    clusterer: Clusterer,
) -> Result<BenchReport> {
    if ratios.is_empty() {
        return Err(Error::Config("no ratios to sweep".into()));
    }
    if ratios.iter().any(|r| !(0.0..=MAX_SWEEP_RATIO).contains(r)) {
        return Err(Error::Config(format!("sweep ratios must lie in [0, {MAX_SWEEP_RATIO}]")));
    }
    if ratios.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Config("sweep ratios must be strictly ascending".into()));
    }
    let tag = match target {
        SweepTarget::Activation => "act",
        SweepTarget::Quantization => "q",
    };
    let specs: Vec<StrategySpec> = ratios
        .iter()
        .map(|&r| {
            let outliers = match target {
                SweepTarget::Activation => OutlierConfig { ratio_act: r, ratio_q: 0.0 },
                SweepTarget::Quantization => OutlierConfig { ratio_act: 0.0, ratio_q: r },
            };
            StrategySpec::cmpq()
                .with_outliers(outliers)
                .with_clusterer(clusterer)
                .with_name(format!("cmpq-{tag}-{r}"))
        })
        .collect();
    run_comparison(layers, &specs, &[b])
}
