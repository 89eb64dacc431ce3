//! `cmpq`: calibrate, quantize, evaluate, benchmark and inspect.
//!
//! Exit codes: 0 success, 1 data or numeric error, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cmpq", version, about = "Channel-wise mixed-precision weight quantization")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "CMPQ_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn activation dumps into per-channel norms (or validate a norms file).
    #[command(group(ArgGroup::new("input").required(true).args(["acts", "norms"])))]
    Calibrate {
        /// Safetensors file of `<layer>.acts` tensors, tokens x d_in.
        #[arg(long)]
        acts: Option<PathBuf>,
        /// Safetensors file of 1-D `<layer>.norms` tensors.
        #[arg(long)]
        norms: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize every 2-D tensor of a weights file.
    Quantize {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        norms: PathBuf,
        /// Average bits per weight, 2 to 4.
        #[arg(long, value_parser = parse_bits)]
        bits: f64,
        #[arg(long, default_value_t = cmpq_core::pipeline::DEFAULT_RATIO_ACT, value_parser = parse_ratio)]
        ratio_act: f64,
        #[arg(long, default_value_t = cmpq_core::pipeline::DEFAULT_RATIO_Q, value_parser = parse_ratio)]
        ratio_q: f64,
        /// Step-size denominator of the grid baseline reported alongside.
        #[arg(long, value_enum, default_value_t = Variant::HalfRange)]
        delta_variant: Variant,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a container against the original weights.
    Eval {
        #[arg(long)]
        cmpq: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Safetensors file of `<layer>.acts` validation inputs.
        #[arg(long)]
        acts: Option<PathBuf>,
    },
    /// Run a benchmark suite on synthetic layers.
    Bench {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Summarize a container.
    Inspect {
        #[arg(long)]
        cmpq: PathBuf,
        /// One JSON object per layer instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Variant {
    HalfRange,
    Conventional,
}

impl From<Variant> for cmpq_core::DeltaVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::HalfRange => Self::HalfRange,
            Variant::Conventional => Self::Conventional,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SuiteArg {
    Preliminary,
    FractionalSweep,
    OutlierSweep,
    UniformVsNonuniform,
}

impl From<SuiteArg> for cmpq_core::bench::Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Preliminary => Self::Preliminary,
            SuiteArg::FractionalSweep => Self::FractionalSweep,
            SuiteArg::OutlierSweep => Self::OutlierSweep,
            SuiteArg::UniformVsNonuniform => Self::UniformVsNonuniform,
        }
    }
}

fn parse_bits(s: &str) -> Result<f64, String> {
    let b: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if !(2.0..=4.0).contains(&b) {
        return Err(format!("{b} is outside [2, 4]"));
    }
    Ok(b)
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if !(0.0..1.0).contains(&r) {
        return Err(format!("{r} is outside [0, 1)"));
    }
    Ok(r)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n as usize);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return ExitCode::from(1);
        }
    };
    let result = pool.install(|| match cli.command {
        Command::Calibrate { acts, norms, out } => commands::calibrate(acts, norms, &out),
        Command::Quantize {
            weights,
            norms,
            bits,
            ratio_act,
            ratio_q,
            delta_variant,
            out,
        } => commands::quantize(&weights, &norms, bits, ratio_act, ratio_q, delta_variant.into(), &out),
        Command::Eval { cmpq, weights, acts } => commands::eval(&cmpq, &weights, acts.as_deref()),
        Command::Bench { suite, out, json } => commands::bench(suite.into(), &out, json.as_deref()),
        Command::Inspect { cmpq, json } => commands::inspect(&cmpq, json),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
