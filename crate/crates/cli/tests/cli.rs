use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmpq_core::bench::Rng;
use cmpq_core::calibration::accumulate_norms;
use cmpq_core::tensor_store::{load_tensors, read_container, save_tensors, DType, NamedTensorSet, TensorEntry};
use cmpq_core::{dequantize_layer, output_error, recon_error};
use serde_json::Value;
use tempfile::TempDir;

fn cmpq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmpq"))
        .args(args)
        .env_remove("CMPQ_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json_lines(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{l:?}: {e}")))
        .collect()
}

fn random(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
    let mut r = Rng::new(seed);
    (0..rows * cols).map(|_| r.normal() as f32).collect()
}

fn entry(shape: &[usize], data: Vec<f32>) -> TensorEntry {
    TensorEntry::new(shape.to_vec(), DType::F32, data).unwrap()
}

struct Toy {
    dir: TempDir,
}

impl Toy {
    /// Two layers, 64x48 and 40x32, with activations and norms files.
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let mut w = NamedTensorSet::new();
        let mut acts = NamedTensorSet::new();
        for (k, (name, d_in, d_out)) in [("fc1", 64, 48), ("fc2", 40, 32)].into_iter().enumerate() {
            w.insert(format!("{name}.weight"), entry(&[d_in, d_out], random(d_in, d_out, k as u64)));
            let mut x = random(100, d_in, 10 + k as u64);
            // uneven channel scales so allocation has something to work with
            for (i, v) in x.iter_mut().enumerate() {
                *v *= 1.0 + (i % d_in) as f32 * 0.1;
            }
            acts.insert(format!("{name}.acts"), entry(&[100, d_in], x));
        }
        w.insert("bias", entry(&[4], vec![0.0; 4]));
        save_tensors(dir.path().join("w.safetensors"), &w).unwrap();
        save_tensors(dir.path().join("acts.safetensors"), &acts).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).to_string_lossy().into_owned()
    }

    fn calibrate(&self) {
        let o = cmpq(&["calibrate", "--acts", &self.s("acts.safetensors"), "--out", &self.s("norms.safetensors")]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }

    fn quantize(&self, bits: &str, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "quantize",
            "--weights",
            self.dir.path().join("w.safetensors").to_str().unwrap(),
            "--norms",
            self.dir.path().join("norms.safetensors").to_str().unwrap(),
            "--bits",
            bits,
            "--out",
            self.dir.path().join(out).to_str().unwrap(),
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        cmpq(&refs)
    }
}

#[test]
fn calibrate_writes_norms() {
    let t = Toy::new();
    t.calibrate();
    let norms = load_tensors(t.p("norms.safetensors"), &DType::ALL).unwrap();
    let acts = load_tensors(t.p("acts.safetensors"), &DType::ALL).unwrap();
    let x = acts.get("fc1.acts").unwrap().to_matrix().unwrap();
    let want = accumulate_norms([&x]).unwrap();
    let got = &norms.get("fc1.norms").unwrap().data;
    for (g, w) in got.iter().zip(&want.values) {
        assert_eq!(*g, *w as f32);
    }
    assert_eq!(norms.get("fc2.norms").unwrap().shape, vec![40]);
}

#[test]
fn calibrate_usage_and_data_errors() {
    let t = Toy::new();
    let o = cmpq(&[
        "calibrate",
        "--acts",
        &t.s("acts.safetensors"),
        "--norms",
        &t.s("acts.safetensors"),
        "--out",
        &t.s("n.safetensors"),
    ]);
    assert_eq!(code(&o), 2);

    let mut bad = NamedTensorSet::new();
    let mut x = random(4, 3, 1);
    x[5] = f32::NAN;
    bad.insert("layer7.acts", entry(&[4, 3], x));
    save_tensors(t.p("bad.safetensors"), &bad).unwrap();
    let o = cmpq(&["calibrate", "--acts", &t.s("bad.safetensors"), "--out", &t.s("n.safetensors")]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("layer7.acts"));
    assert!(!t.p("n.safetensors").exists());
}

#[test]
fn quantize_fractional_budget() {
    let t = Toy::new();
    t.calibrate();
    let o = t.quantize("2.2", "m.cmpq", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = json_lines(&o);
    let layers: Vec<&Value> = lines.iter().filter(|l| l.get("layer").is_some()).collect();
    assert_eq!(layers.len(), 2);
    for l in layers {
        let d_in = l["d_in"].as_f64().unwrap();
        let fp16 = l["fp16_channels"].as_f64().unwrap();
        let nominal = l["nominal_bits"].as_f64().unwrap();
        assert!((nominal - 2.2).abs() <= 2.0 / (d_in - fp16), "{l}");
        assert!(l["effective_bits"].as_f64().unwrap() >= nominal);
    }
    let c = read_container(t.p("m.cmpq")).unwrap();
    assert_eq!(c.metadata.bit_budget, Some(2.2));
}

#[test]
fn quantize_rejects_bad_bits_before_reading() {
    let o = cmpq(&["quantize", "--weights", "nope", "--norms", "nope", "--bits", "5", "--out", "x.cmpq"]);
    assert_eq!(code(&o), 2);
    let o = cmpq(&["quantize", "--weights", "nope", "--norms", "nope", "--bits", "3", "--ratio-q", "1.5", "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn quantize_missing_norms_names_layer() {
    let t = Toy::new();
    let mut n = NamedTensorSet::new();
    n.insert("fc1.norms", entry(&[64], vec![1.0; 64]));
    save_tensors(t.p("norms.safetensors"), &n).unwrap();
    let o = t.quantize("3", "m.cmpq", &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("\"fc2\""));
    assert!(!t.p("m.cmpq").exists());
}

#[test]
fn thread_count_does_not_change_output() {
    let t = Toy::new();
    t.calibrate();
    assert_eq!(code(&t.quantize("2.7", "a.cmpq", &["--threads", "1"])), 0);
    assert_eq!(code(&t.quantize("2.7", "b.cmpq", &["--threads", "3"])), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_cmpq"))
        .args(["quantize", "--weights", &t.s("w.safetensors"), "--norms", &t.s("norms.safetensors")])
        .args(["--bits", "2.7", "--out", &t.s("c.cmpq")])
        .env("CMPQ_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let a = std::fs::read(t.p("a.cmpq")).unwrap();
    assert_eq!(a, std::fs::read(t.p("b.cmpq")).unwrap());
    assert_eq!(a, std::fs::read(t.p("c.cmpq")).unwrap());
}

#[test]
fn eval_matches_library_metrics() {
    let t = Toy::new();
    t.calibrate();
    assert_eq!(code(&t.quantize("3", "m.cmpq", &[])), 0);
    let o = cmpq(&["eval", "--cmpq", &t.s("m.cmpq"), "--weights", &t.s("w.safetensors"), "--acts", &t.s("acts.safetensors")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = json_lines(&o);
    let c = read_container(t.p("m.cmpq")).unwrap();
    let w = load_tensors(t.p("w.safetensors"), &DType::ALL).unwrap();
    let acts = load_tensors(t.p("acts.safetensors"), &DType::ALL).unwrap();
    for (layer, line) in c.layers.iter().zip(&lines) {
        let wm = w.get(&format!("{}.weight", layer.name)).unwrap().to_matrix().unwrap();
        let x = acts.get(&format!("{}.acts", layer.name)).unwrap().to_matrix().unwrap();
        let r = dequantize_layer(layer).unwrap();
        assert_eq!(line["recon_mse"].as_f64().unwrap(), recon_error(&wm, &r).unwrap().mse);
        assert_eq!(line["output_error"].as_f64().unwrap(), output_error(&wm, &r, &x).unwrap());
    }
}

#[test]
fn eval_lossless_layer_and_shape_mismatch() {
    let t = Toy::new();
    // four distinct values per row at 2 bits reconstruct exactly
    let vals = [-1.5f32, -0.25, 0.5, 2.0];
    let data: Vec<f32> = (0..8 * 16).map(|k| vals[(k * 7 + k / 16) % 4]).collect();
    let mut w = NamedTensorSet::new();
    w.insert("exact.weight", entry(&[8, 16], data));
    save_tensors(t.p("w.safetensors"), &w).unwrap();
    let mut n = NamedTensorSet::new();
    n.insert("exact.norms", entry(&[8], (1..=8).map(|v| v as f32).collect()));
    save_tensors(t.p("norms.safetensors"), &n).unwrap();
    assert_eq!(code(&t.quantize("2", "m.cmpq", &["--ratio-act", "0", "--ratio-q", "0"])), 0);
    let o = cmpq(&["eval", "--cmpq", &t.s("m.cmpq"), "--weights", &t.s("w.safetensors")]);
    assert_eq!(code(&o), 0);
    let line = &json_lines(&o)[0];
    assert_eq!(line["recon_mse"].as_f64(), Some(0.0));
    assert_eq!(line["frobenius_rel"].as_f64(), Some(0.0));

    let mut other = NamedTensorSet::new();
    other.insert("exact.weight", entry(&[16, 8], vec![0.0; 128]));
    save_tensors(t.p("other.safetensors"), &other).unwrap();
    let o = cmpq(&["eval", "--cmpq", &t.s("m.cmpq"), "--weights", &t.s("other.safetensors")]);
    assert_eq!(code(&o), 1);
}

fn strip_timing(csv: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(csv)
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn bench_fractional_sweep_is_deterministic() {
    let t = Toy::new();
    let run = |out: &str| {
        let o = cmpq(&["bench", "--suite", "fractional-sweep", "--out", &t.s(out), "--json", &t.s("r.json")]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(t.p(out)).unwrap()
    };
    let a = strip_timing(&run("a.csv"));
    let b = strip_timing(&run("b.csv"));
    assert_eq!(a, b);
    let budgets: Vec<f64> = a[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(budgets, vec![2.0, 2.2, 2.4, 2.6, 2.8, 3.0, 3.2, 3.4, 3.6, 3.8, 4.0]);
    let json: Value = serde_json::from_slice(&std::fs::read(t.p("r.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 11);
}

#[test]
fn bench_unknown_suite_is_usage_error() {
    let o = cmpq(&["bench", "--suite", "perplexity", "--out", "x.csv"]);
    assert_eq!(code(&o), 2);
    assert!(!Path::new("x.csv").exists());
}

#[test]
fn inspect_table_and_corruption() {
    let t = Toy::new();
    t.calibrate();
    assert_eq!(code(&t.quantize("3.3", "m.cmpq", &[])), 0);
    let o = cmpq(&["inspect", "--cmpq", &t.s("m.cmpq")]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("fc1") && text.contains("fc2"), "{text}");

    let o = cmpq(&["inspect", "--cmpq", &t.s("m.cmpq"), "--json"]);
    let c = read_container(t.p("m.cmpq")).unwrap();
    for (line, layer) in json_lines(&o).iter().zip(&c.layers) {
        let h = &line["histogram"];
        let sum: u64 = ["fp16", "2", "3", "4"].iter().map(|k| h[k].as_u64().unwrap()).sum();
        assert_eq!(sum as usize, layer.d_in);
        assert_eq!(line["d_in"].as_u64().unwrap() as usize, layer.precision.len());
    }

    let bytes = std::fs::read(t.p("m.cmpq")).unwrap();
    std::fs::write(t.p("cut.cmpq"), &bytes[..bytes.len() - 9]).unwrap();
    let o = cmpq(&["inspect", "--cmpq", &t.s("cut.cmpq")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(code(&cmpq(&["inspect", "--cmpq", "x", "--verbose"])), 2);
    assert_eq!(code(&cmpq(&["inspect", "--cmpq", "x", "--threads", "0"])), 2);
}
