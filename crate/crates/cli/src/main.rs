use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ironet_core::data::{self, SequenceClip, Split, SyntheticSpec};
use ironet_core::eval::{self, Aggregation};
use ironet_core::numerics::{default_shapes, grad_check, Tensor, GRAD_CHECK_OPS};
use ironet_core::pipeline::{self, load_checkpoint, streaming_infer, InferenceOptions, TrainConfig};

/// Relative-error ceiling for `iron gradcheck`.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "iron", version, about = "Flow-free memory-attention freespace segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Gen(GenArgs),
    /// Train on the train split and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split and write a JSON report.
    Eval(EvalArgs),
    /// Stream one sequence directory and write predicted masks.
    Infer(InferArgs),
    /// Train and evaluate a grid of config overrides over seeds 0, 1, 2.
    Ablate(AblateArgs),
    /// Finite-difference check of the differentiable primitives.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    sequences: usize,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    /// Frame size as HxW.
    #[arg(long, default_value = "128x128", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    occlusion_prob: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a full or partial training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    queue_len: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    no_adt: bool,
    #[arg(long)]
    no_memory: bool,
    #[arg(long)]
    no_sgmc: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    report: PathBuf,
    /// Average metrics per frame instead of over split-accumulated counts.
    #[arg(long = "macro")]
    macro_avg: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory holding `frames/` and `timestamps.txt`.
    #[arg(long)]
    sequence: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write `fps.json` into the output directory.
    #[arg(long)]
    fps_report: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON array of config overrides, each optionally with an `id`.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Base training config (JSON); defaults otherwise.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check a single primitive; all of them otherwise.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(h)?, p(w)?))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        n_sequences: a.sequences,
        frames_per_sequence: a.frames,
        height: a.size.0,
        width: a.size.1,
        seed: a.seed,
        ..Default::default()
    };
    if let Some(p) = a.occlusion_prob {
        spec.occlusion_prob = p;
    }
    spec.occlusion_len = spec.occlusion_len.min(a.frames.saturating_sub(1).max(1));
    let summary = data::generate_synthetic_dataset(&spec, &a.out)?;
    println!(
        "wrote {} sequences ({} frames; {} train / {} test) to {}",
        summary.sequences,
        summary.frames,
        summary.train,
        summary.test,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.queue_len {
        cfg.queue_len = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.adt_enabled &= !a.no_adt;
    cfg.memory_enabled &= !a.no_memory;
    cfg.sgmc_enabled &= !a.no_sgmc;
    let outcome = pipeline::train(cfg, &a.data, &a.out)?;
    for e in &outcome.log {
        println!("epoch {:>3}  loss {:.5}  {:.1}s", e.epoch, e.mean_loss, e.seconds);
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model = ckpt.to_model()?;
    let sequences = data::load_sequences(&a.data, a.split)?;
    if sequences.is_empty() {
        bail!("split has no sequences");
    }
    let opts = InferenceOptions::from(&ckpt.config);
    let mut summary = eval::evaluate(&model, &opts, &sequences)?;
    if a.macro_avg {
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for seq in &sequences {
            let r = streaming_infer(&model, &opts, seq)?;
            preds.extend(r.records.into_iter().map(|r| r.binary_mask));
            truths.extend(seq.masks.iter().cloned());
        }
        summary.metrics = eval::segmentation_metrics_with(&preds, &truths, Aggregation::Macro)?;
    }
    let split = match a.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut report = eval::report_json(&summary, &ckpt.config, split);
    report["aggregation"] = serde_json::json!(if a.macro_avg { "macro" } else { "micro" });
    write_text(&a.report, &serde_json::to_string_pretty(&report)?)?;
    let m = &summary.metrics;
    println!(
        "P {:.2}  R {:.2}  F1 {:.2}  IoU {:.2}  tc-IoU {:.2}  flicker {:.2}  {:.1} FPS",
        m.precision * 100.0,
        m.recall * 100.0,
        m.f1 * 100.0,
        m.iou * 100.0,
        summary.temporal.mean_consecutive_iou * 100.0,
        summary.temporal.flicker_rate * 100.0,
        summary.mean_fps
    );
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model = ckpt.to_model()?;
    let frames = data::load_frames_dir(&a.sequence)?;
    let masks = frames.iter().map(|f| Tensor::zeros(&[f.height(), f.width()])).collect();
    let id = a.sequence.file_name().and_then(|s| s.to_str()).unwrap_or("sequence").to_string();
    let seq = SequenceClip { sequence_id: id, frames, masks, is_training_clip: false };
    let result = streaming_infer(&model, &InferenceOptions::from(&ckpt.config), &seq)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, rec) in result.records.iter().enumerate() {
        data::write_mask(&a.out.join(format!("{i:06}.png")), &rec.binary_mask)?;
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {} masks to {} ({:.1} FPS)", result.records.len(), a.out.display(), result.mean_fps);
    if a.fps_report {
        let latencies: Vec<f64> = result.records.iter().map(|r| r.latency_ms).collect();
        let report = serde_json::json!({
            "frames": result.records.len(),
            "mean_fps": result.mean_fps,
            "latency_ms": latencies,
            "sgmc_active": result.records.iter().map(|r| r.sgmc_active).collect::<Vec<_>>(),
            "warnings": result.warnings,
        });
        write_text(&a.out.join("fps.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base: TrainConfig = match &a.base {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let text = fs::read_to_string(&a.grid).with_context(|| format!("reading {}", a.grid.display()))?;
    let grid = eval::parse_grid(&text)?;
    let rows = eval::run_ablation(&base, &grid, &a.data)?;
    let mut buf = Vec::new();
    eval::write_ablation_csv(&rows, &mut buf)?;
    write_text(&a.report, std::str::from_utf8(&buf)?)?;
    for r in &rows {
        match &r.error {
            None => println!("{:<16} {:<14} L={}  IoU {:.2}  tc-IoU {:.2}", r.config_id, r.flags, r.queue_len, r.iou * 100.0, r.tc_iou * 100.0),
            Some(e) => println!("{:<16} error: {e}", r.config_id),
        }
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let ops: Vec<&str> = match &a.op {
        Some(op) if GRAD_CHECK_OPS.contains(&op.as_str()) => vec![op.as_str()],
        Some(op) => bail!("unknown op `{op}`; known: {}", GRAD_CHECK_OPS.join(", ")),
        None => GRAD_CHECK_OPS.to_vec(),
    };
    let mut ok = true;
    for op in ops {
        let shapes = default_shapes(op)?;
        let mut worst: f64 = 0.0;
        for seed in 0..a.seeds {
            worst = worst.max(grad_check(op, &shapes, seed)?);
        }
        let pass = worst <= GRAD_TOLERANCE;
        ok &= pass;
        println!("{:<26} max rel err {worst:.2e}  {}", op, if pass { "ok" } else { "FAIL" });
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Infer(a) => infer(a).map(|_| true),
        Command::Ablate(a) => ablate(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
