//! `phnet`: data generation, training, evaluation and cost reports.
//!
//! Exit codes: 0 on success, 1 for usage errors (unknown subcommand or flag,
//! malformed value), 2 for runtime failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use phnet_core::data::{generate_dataset, SyntheticSpec, Split};
use phnet_core::harness::{
    bench, evaluate_checkpoint, mixer_scaling, network_grad_check, tiny_gradcheck_config, train, EvalSettings,
    TrainConfig,
};
use phnet_core::metrics::{write_report, HausdorffMode};
use phnet_core::model::{read_manifest, PhNet, PhnetConfig};
use phnet_core::{PhnetError, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "phnet", version, about = "Anisotropic volumetric segmentation with a hybrid CNN+MLP network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a network and write a run log and the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metrics CSV.
    Eval(EvalArgs),
    /// Time inference and report FLOPs, parameters and peak memory.
    Bench(BenchArgs),
    /// Print the per-layer FLOP breakdown and mixer scaling.
    Flops(FlopsArgs),
    /// Check network gradients against central finite differences (f64).
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator settings (JSON); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of cases.
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Cases held out for validation (default: one in five).
    #[arg(long)]
    val: Option<usize>,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
}

/// Contents of a `train --config` file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: PhnetConfig,
    #[serde(default)]
    train: TrainConfig,
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON): `{"model": {...}, "train": {...}, "data": "dir"}`.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for the run log and checkpoint when the config names none.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fixed learning rate instead of the batch-size rule.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum HdArg {
    Max,
    P95,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Window `d,h,w` (default: the checkpoint's patch size).
    #[arg(long, value_parser = parse_dims)]
    patch: Option<[usize; 3]>,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    /// Surface Dice tolerance in mm.
    #[arg(long, default_value_t = 1.0)]
    tolerance: f64,
    #[arg(long, value_enum, default_value = "p95")]
    hd: HdArg,
    /// CSV destination (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Model configuration (JSON); the default network when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input extents `d,h,w` (default: the model's patch size).
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Input coordinates to probe.
    #[arg(long, default_value_t = 40)]
    input_samples: usize,
    /// Coordinates to probe per parameter tensor.
    #[arg(long, default_value_t = 3)]
    per_param: usize,
    /// Failure threshold on the relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected d,h,w, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("{p:?} is not a positive integer"))?;
        if *o == 0 {
            return Err(format!("extents must be positive, got {s:?}"));
        }
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| PhnetError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|e| PhnetError::Format { field: path.display().to_string(), msg: e.to_string() })
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let val = a.val.unwrap_or(a.cases / 5);
    let m = generate_dataset(&a.out, &spec, a.cases, val)?;
    eprintln!(
        "wrote {} cases ({} train, {} val) to {}",
        m.cases.len(),
        m.ids(Split::Train).count(),
        m.ids(Split::Val).count(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let run: RunConfig = read_json(&a.config)?;
    let mut tc = run.train;
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.lr = Some(v);
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    fs::create_dir_all(&a.out).map_err(|source| PhnetError::Io { path: a.out.clone(), source })?;
    tc.log.get_or_insert_with(|| a.out.join("run.jsonl"));
    tc.checkpoint.get_or_insert_with(|| a.out.join("best.ckpt"));
    let data = a
        .data
        .or(run.data)
        .ok_or_else(|| PhnetError::Config("no dataset directory: pass --data or set \"data\" in the config".into()))?;
    let out = train(&run.model, &data, &tc)?;
    let summary = serde_json::json!({
        "steps": out.records.iter().filter(|r| matches!(r, phnet_core::harness::LogRecord::Step { .. })).count(),
        "final_loss": out.final_loss,
        "best_val_dice": out.best_val_dice,
        "log": tc.log,
        "checkpoint": tc.checkpoint,
    });
    print_json(&summary)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let manifest = read_manifest(&a.checkpoint)?;
    let settings = EvalSettings {
        patch_dhw: a.patch.unwrap_or(manifest.config.patch_dhw),
        overlap: a.overlap,
        tolerance_mm: a.tolerance,
        hd_mode: match a.hd {
            HdArg::Max => HausdorffMode::Max,
            HdArg::P95 => HausdorffMode::P95,
        },
    };
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let rows = evaluate_checkpoint(&a.checkpoint, &a.data, split, &settings)?;
    match &a.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|source| PhnetError::Io { path: path.clone(), source })?;
            write_report(file, &rows)?;
        }
        None => write_report(std::io::stdout().lock(), &rows)?,
    }
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} rows could not be evaluated", rows.len());
    }
    Ok(())
}

fn model_config(path: &Option<PathBuf>) -> Result<PhnetConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(PhnetConfig::default()),
    }
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let cfg = model_config(&a.config)?;
    let report = bench(&cfg, a.batch, a.dims.unwrap_or(cfg.patch_dhw), a.warmup, a.repeats)?;
    print_json(&report)
}

fn run_flops(a: FlopsArgs) -> Result<()> {
    let cfg = model_config(&a.config)?;
    let dims = a.dims.unwrap_or(cfg.patch_dhw);
    let net = PhNet::<f32>::build(&cfg, 0)?;
    let breakdown = net.flop_breakdown(a.batch, dims)?;
    let total: u64 = breakdown.iter().map(|(_, f)| f).sum();
    let layers: Vec<_> = breakdown.iter().map(|(name, f)| serde_json::json!({ "layer": name, "flops": f })).collect();
    print_json(&serde_json::json!({
        "batch": a.batch,
        "dims": dims,
        "params": net.count_params(),
        "flops": total,
        "layers": layers,
        "mixer_scaling": mixer_scaling(32, 16, 16)?,
    }))
}

fn run_grad_check(a: GradCheckArgs) -> Result<()> {
    let report = network_grad_check(&tiny_gradcheck_config(), a.seed, a.input_samples, a.per_param)?;
    print_json(&report)?;
    if report.max() >= a.tolerance {
        return Err(PhnetError::InvalidArgument(format!(
            "relative error {:.3e} exceeds {:.1e}",
            report.max(),
            a.tolerance
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Bench(a) => run_bench(a),
        Command::Flops(a) => run_flops(a),
        Command::GradCheck(a) => run_grad_check(a),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
