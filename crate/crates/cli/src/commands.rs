use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use cmpq_core::bench::{run_suite, suites::SUITE_SEED, Suite};
use cmpq_core::calibration::{collect_layer_norms, norms_from_activations, ActivationNorms};
use cmpq_core::pipeline::{quantize_model, QuantizeConfig, QuantizedLayer};
use cmpq_core::quantizer::{uniform_dequantize, uniform_quantize};
use cmpq_core::tensor_store::{self, DType, NamedTensorSet, TensorEntry};
use cmpq_core::{dequantize_layer, output_error, recon_error, BitBudget, DeltaVariant, Matrix};

const RTN_GROUP: usize = 128;

fn load(path: &Path) -> Result<NamedTensorSet> {
    tensor_store::load_tensors(path, &DType::ALL).with_context(|| format!("reading {}", path.display()))
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

pub fn calibrate(acts: Option<std::path::PathBuf>, norms: Option<std::path::PathBuf>, out: &Path) -> Result<()> {
    let layers: BTreeMap<String, ActivationNorms> = match (acts, norms) {
        (Some(p), None) => norms_from_activations(&load(&p)?).with_context(|| format!("in {}", p.display()))?,
        (None, Some(p)) => collect_layer_norms(&load(&p)?).with_context(|| format!("in {}", p.display()))?,
        _ => unreachable!("clap enforces exactly one input"),
    };
    let mut set = NamedTensorSet::new();
    for (name, n) in &layers {
        let data = n.values.iter().map(|&v| v as f32).collect();
        set.insert(format!("{name}.norms"), TensorEntry::new(vec![n.len()], DType::F32, data)?);
        emit(json!({"layer": name, "d_in": n.len(), "tokens": n.token_count}));
    }
    tensor_store::save_tensors(out, &set).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

/// Grid rounding of every quantized channel at its allocated width; protected
/// channels and element outliers are taken from the layer as stored.
fn rtn_baseline(w: &Matrix, layer: &QuantizedLayer, variant: DeltaVariant) -> Result<Matrix> {
    let mut out = dequantize_layer(layer)?;
    for i in 0..layer.d_in {
        let Some(bits) = layer.precision.get(i).bits() else {
            continue;
        };
        let (cols, _) = layer.outliers.row(i);
        let kept: Vec<u32> = cols.to_vec();
        let dst = out.row_mut(i);
        for (k, (src, d)) in w.row(i).chunks(RTN_GROUP).zip(dst.chunks_mut(RTN_GROUP)).enumerate() {
            let (p, idx) = uniform_quantize(src, bits, variant)?;
            for (j, v) in uniform_dequantize(&p, &idx).into_iter().enumerate() {
                if kept.binary_search(&((k * RTN_GROUP + j) as u32)).is_err() {
                    d[j] = v;
                }
            }
        }
    }
    Ok(out)
}

pub fn quantize(
    weights: &Path,
    norms: &Path,
    bits: f64,
    ratio_act: f64,
    ratio_q: f64,
    variant: DeltaVariant,
    out: &Path,
) -> Result<()> {
    let mut cfg = QuantizeConfig::new(BitBudget::new(bits)?).with_ratios(ratio_act, ratio_q);
    cfg.delta_variant = variant;
    cfg.validate()?;
    let w_set = load(weights)?;
    let norms = collect_layer_norms(&load(norms)?).with_context(|| format!("in {}", norms.display()))?;
    let container = quantize_model(&w_set, &norms, &cfg)?;
    for layer in &container.layers {
        let w = weight_for(&w_set, &layer.name)?;
        let recon = dequantize_layer(layer)?;
        let r = recon_error(&w, &recon)?;
        let rtn = recon_error(&w, &rtn_baseline(&w, layer, variant)?)?;
        let h = layer.precision.histogram();
        emit(json!({
            "layer": layer.name,
            "d_in": layer.d_in,
            "d_out": layer.d_out,
            "nominal_bits": layer.stats.nominal_bits,
            "effective_bits": layer.stats.effective_bits,
            "recon_mse": r.mse,
            "frobenius_rel": r.frobenius_rel,
            "rtn_recon_mse": rtn.mse,
            "fp16_channels": h[0],
            "bits2": h[1],
            "bits3": h[2],
            "bits4": h[3],
            "element_outliers": layer.element_outlier_count(),
        }));
    }
    tensor_store::write_container(out, &container.layers, &container.metadata)
        .with_context(|| format!("writing {}", out.display()))?;
    emit(json!({"written": out.display().to_string(), "layers": container.layers.len()}));
    Ok(())
}

fn weight_for(set: &NamedTensorSet, layer: &str) -> Result<Matrix> {
    let entry = set
        .get(&format!("{layer}.weight"))
        .or_else(|| set.get(layer))
        .with_context(|| format!("no weight tensor for layer {layer:?}"))?;
    entry.to_matrix().with_context(|| format!("layer {layer:?}"))
}

pub fn eval(cmpq: &Path, weights: &Path, acts: Option<&Path>) -> Result<()> {
    let container = tensor_store::read_container(cmpq).with_context(|| format!("reading {}", cmpq.display()))?;
    let w_set = load(weights)?;
    let acts = acts.map(load).transpose()?;
    for layer in &container.layers {
        let w = weight_for(&w_set, &layer.name)?;
        if w.shape() != (layer.d_in, layer.d_out) {
            bail!(
                "layer {:?}: weights are {:?} but the container holds {}x{}",
                layer.name,
                w.shape(),
                layer.d_in,
                layer.d_out
            );
        }
        let recon = dequantize_layer(layer)?;
        let r = recon_error(&w, &recon)?;
        let mut line = json!({
            "layer": layer.name,
            "recon_mse": r.mse,
            "frobenius_rel": r.frobenius_rel,
        });
        if let Some(set) = &acts {
            let name = format!("{}.acts", layer.name);
            let x = set
                .get(&name)
                .with_context(|| format!("no validation inputs {name:?}"))?
                .to_matrix()?;
            line["output_error"] = json!(output_error(&w, &recon, &x).with_context(|| name.clone())?);
        }
        emit(line);
    }
    Ok(())
}

pub fn bench(suite: Suite, out: &Path, json_out: Option<&Path>) -> Result<()> {
    eprintln!("running suite {}", suite.name());
    let report = run_suite(suite, SUITE_SEED)?;
    for row in &report.rows {
        emit(serde_json::to_value(row)?);
    }
    tensor_store::write_atomic(out, &report.to_csv()?).with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = json_out {
        tensor_store::write_atomic(p, report.to_json()?.as_bytes())
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn inspect(cmpq: &Path, as_json: bool) -> Result<()> {
    let c = tensor_store::read_container(cmpq).with_context(|| format!("reading {}", cmpq.display()))?;
    let fmt = |t: Option<f64>| t.map_or("-".to_string(), |v| format!("{v:.6}"));
    if !as_json {
        println!(
            "container v{}  budget {}  ratios act={} q={}",
            c.version,
            c.metadata.bit_budget.map_or("-".into(), |b| b.to_string()),
            c.metadata.ratio_act,
            c.metadata.ratio_q
        );
        println!(
            "{:<24} {:>6} {:>6} {:>5} {:>5} {:>5} {:>5} {:>8} {:>12} {:>12} {:>8} {:>8}",
            "layer", "d_in", "d_out", "fp16", "2b", "3b", "4b", "elem_out", "s", "l", "nominal", "eff"
        );
    }
    for layer in &c.layers {
        let h = layer.precision.histogram();
        let t = layer.precision.thresholds;
        if as_json {
            emit(json!({
                "layer": layer.name,
                "d_in": layer.d_in,
                "d_out": layer.d_out,
                "histogram": {"fp16": h[0], "2": h[1], "3": h[2], "4": h[3]},
                "element_outliers": layer.element_outlier_count(),
                "nnz": layer.outliers.nnz(),
                "threshold_s": t.low,
                "threshold_l": t.high,
                "nominal_bits": layer.stats.nominal_bits,
                "effective_bits": layer.stats.effective_bits,
            }));
        } else {
            println!(
                "{:<24} {:>6} {:>6} {:>5} {:>5} {:>5} {:>5} {:>8} {:>12} {:>12} {:>8.4} {:>8.4}",
                layer.name,
                layer.d_in,
                layer.d_out,
                h[0],
                h[1],
                h[2],
                h[3],
                layer.element_outlier_count(),
                fmt(t.low),
                fmt(t.high),
                layer.stats.nominal_bits,
                layer.stats.effective_bits
            );
        }
    }
    Ok(())
}
