//! Segmentation metrics, temporal consistency, split evaluation and the ablation harness.

use std::collections::BTreeMap;
#[cfg(feature = "io")]
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::SequenceClip;
use crate::numerics::Tensor;
use crate::pipeline::{streaming_infer, train_on, InferenceOptions, Model, PipelineError, TrainConfig};

/// Seeds every ablation row is trained with.
pub const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
pub const BINARY_THRESHOLD: f32 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pair {index}: prediction {pred:?} and truth {truth:?} differ in shape")]
    ShapeMismatch { index: usize, pred: Vec<usize>, truth: Vec<usize> },
    #[error("{predictions} predictions but {truths} truths")]
    CountMismatch { predictions: usize, truths: usize },
    #[error("temporal consistency needs at least 2 masks, got {0}")]
    TooFewMasks(usize),
    #[error("invalid override {index}: {message}")]
    Override { index: usize, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Count one prediction/truth pair; values above 0.5 are positive.
    pub fn from_pair(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p > BINARY_THRESHOLD, t > BINARY_THRESHOLD) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn metrics(&self) -> SegmentationMetrics {
        let mut undefined = Vec::new();
        let mut ratio = |name: &'static str, num: u64, den: u64| {
            if den == 0 {
                undefined.push(name);
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio("precision", self.tp, self.tp + self.fp);
        let recall = ratio("recall", self.tp, self.tp + self.fn_);
        let f1 = ratio("f1", 2 * self.tp, 2 * self.tp + self.fp + self.fn_);
        let iou = ratio("iou", self.tp, self.tp + self.fp + self.fn_);
        SegmentationMetrics { precision, recall, f1, iou, undefined }
    }
}

/// Scores in `[0, 1]`. `undefined` lists the metrics whose ratio was 0/0 (reported as 0).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub undefined: Vec<&'static str>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Counts summed over the split, then one ratio.
    #[default]
    Micro,
    /// Ratio per pair, then the mean.
    Macro,
}

fn check_pairs(predictions: &[Tensor<f32>], truths: &[Tensor<f32>]) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(EvalError::CountMismatch { predictions: predictions.len(), truths: truths.len() });
    }
    for (index, (p, t)) in predictions.iter().zip(truths).enumerate() {
        if p.shape() != t.shape() {
            return Err(EvalError::ShapeMismatch { index, pred: p.shape().to_vec(), truth: t.shape().to_vec() });
        }
    }
    Ok(())
}

pub fn confusion_counts(predictions: &[Tensor<f32>], truths: &[Tensor<f32>]) -> Result<ConfusionCounts> {
    check_pairs(predictions, truths)?;
    let mut total = ConfusionCounts::default();
    for (p, t) in predictions.iter().zip(truths) {
        total.merge(&ConfusionCounts::from_pair(p, t));
    }
    Ok(total)
}

/// Micro-averaged precision, recall, F1 and IoU.
pub fn segmentation_metrics(predictions: &[Tensor<f32>], truths: &[Tensor<f32>]) -> Result<SegmentationMetrics> {
    segmentation_metrics_with(predictions, truths, Aggregation::Micro)
}

pub fn segmentation_metrics_with(
    predictions: &[Tensor<f32>],
    truths: &[Tensor<f32>],
    aggregation: Aggregation,
) -> Result<SegmentationMetrics> {
    match aggregation {
        Aggregation::Micro => Ok(confusion_counts(predictions, truths)?.metrics()),
        Aggregation::Macro => {
            check_pairs(predictions, truths)?;
            let per: Vec<SegmentationMetrics> =
                predictions.iter().zip(truths).map(|(p, t)| ConfusionCounts::from_pair(p, t).metrics()).collect();
            let n = per.len().max(1) as f64;
            let mean = |f: fn(&SegmentationMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
            let mut undefined: Vec<&'static str> = per.iter().flat_map(|m| m.undefined.iter().copied()).collect();
            undefined.sort_unstable();
            undefined.dedup();
            if per.is_empty() {
                undefined = vec!["precision", "recall", "f1", "iou"];
            }
            Ok(SegmentationMetrics {
                precision: mean(|m| m.precision),
                recall: mean(|m| m.recall),
                f1: mean(|m| m.f1),
                iou: mean(|m| m.iou),
                undefined,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalConsistency {
    pub mean_consecutive_iou: f64,
    pub flicker_rate: f64,
}

/// Stability of consecutive predictions. Two empty masks count as IoU 1.
pub fn temporal_consistency(masks: &[Tensor<f32>]) -> Result<TemporalConsistency> {
    if masks.len() < 2 {
        return Err(EvalError::TooFewMasks(masks.len()));
    }
    let mut iou_sum = 0.0;
    let mut flicker_sum = 0.0;
    for (i, pair) in masks.windows(2).enumerate() {
        if pair[0].shape() != pair[1].shape() {
            return Err(EvalError::ShapeMismatch {
                index: i + 1,
                pred: pair[1].shape().to_vec(),
                truth: pair[0].shape().to_vec(),
            });
        }
        let c = ConfusionCounts::from_pair(&pair[1], &pair[0]);
        let union = c.tp + c.fp + c.fn_;
        iou_sum += if union == 0 { 1.0 } else { c.tp as f64 / union as f64 };
        flicker_sum += if c.total() == 0 { 0.0 } else { (c.fp + c.fn_) as f64 / c.total() as f64 };
    }
    let n = (masks.len() - 1) as f64;
    Ok(TemporalConsistency { mean_consecutive_iou: iou_sum / n, flicker_rate: flicker_sum / n })
}

/// Metrics over a split, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub metrics: SegmentationMetrics,
    pub counts: ConfusionCounts,
    /// Mean over sequences of their temporal consistency.
    pub temporal: TemporalConsistency,
    pub mean_fps: f64,
    pub sequences: usize,
    pub frames: usize,
    pub warnings: Vec<String>,
}

/// Stream every sequence through the model and score the binarised predictions.
pub fn evaluate(model: &Model, options: &InferenceOptions, sequences: &[SequenceClip]) -> Result<EvalSummary> {
    let mut counts = ConfusionCounts::default();
    let (mut tc_iou, mut tc_flicker, mut tc_n) = (0.0, 0.0, 0usize);
    let (mut fps_sum, mut fps_n) = (0.0, 0usize);
    let mut warnings = Vec::new();
    let mut frames = 0;
    for seq in sequences {
        let result = streaming_infer(model, options, seq)?;
        let preds: Vec<Tensor<f32>> = result.records.into_iter().map(|r| r.binary_mask).collect();
        counts.merge(&confusion_counts(&preds, &seq.masks)?);
        frames += preds.len();
        if preds.len() >= 2 {
            let tc = temporal_consistency(&preds)?;
            tc_iou += tc.mean_consecutive_iou;
            tc_flicker += tc.flicker_rate;
            tc_n += 1;
        }
        if result.mean_fps > 0.0 {
            fps_sum += result.mean_fps;
            fps_n += 1;
        }
        warnings.extend(result.warnings);
    }
    let tc_n = tc_n.max(1) as f64;
    Ok(EvalSummary {
        metrics: counts.metrics(),
        counts,
        temporal: TemporalConsistency { mean_consecutive_iou: tc_iou / tc_n, flicker_rate: tc_flicker / tc_n },
        mean_fps: if fps_n == 0 { 0.0 } else { fps_sum / fps_n as f64 },
        sequences: sequences.len(),
        frames,
        warnings,
    })
}

fn pct(v: f64) -> f64 {
    (v * 1e4).round() / 100.0
}

/// JSON report: metrics in percent with two decimals, temporal consistency, FPS and the config.
pub fn report_json(summary: &EvalSummary, config: &TrainConfig, split: &str) -> Value {
    let m = &summary.metrics;
    serde_json::json!({
        "split": split,
        "sequences": summary.sequences,
        "frames": summary.frames,
        "precision": pct(m.precision),
        "recall": pct(m.recall),
        "f1": pct(m.f1),
        "iou": pct(m.iou),
        "undefined_metrics": m.undefined,
        "temporal_consistency": {
            "mean_consecutive_iou": pct(summary.temporal.mean_consecutive_iou),
            "flicker_rate": pct(summary.temporal.flicker_rate),
        },
        "mean_fps": (summary.mean_fps * 100.0).round() / 100.0,
        "counts": summary.counts,
        "warnings": summary.warnings,
        "config": config,
    })
}

/// One grid entry: an optional `id` plus fields merged into the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub id: Option<String>,
    pub fields: serde_json::Map<String, Value>,
}

/// Parse a grid file: a JSON array of objects, each optionally carrying an `id`.
pub fn parse_grid(text: &str) -> Result<Vec<Override>> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| EvalError::Override { index: 0, message: format!("grid is not JSON: {e}") })?;
    let Value::Array(items) = value else {
        return Err(EvalError::Override { index: 0, message: "grid must be a JSON array".into() });
    };
    items
        .into_iter()
        .enumerate()
        .map(|(index, item)| {
            let Value::Object(mut fields) = item else {
                return Err(EvalError::Override { index, message: "each override must be an object".into() });
            };
            let id = match fields.remove("id") {
                None => None,
                Some(Value::String(s)) => Some(s),
                Some(other) => Some(other.to_string()),
            };
            Ok(Override { id, fields })
        })
        .collect()
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Apply an override to `base`; unknown or ill-typed fields are rejected.
pub fn apply_override(base: &TrainConfig, ov: &Override, index: usize) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(base).expect("config serialises");
    let Value::Object(known) = &value else { unreachable!() };
    if let Some(k) = ov.fields.keys().find(|k| !known.contains_key(*k)) {
        return Err(EvalError::Override { index, message: format!("unknown field `{k}`") });
    }
    merge(&mut value, &Value::Object(ov.fields.clone()));
    let config: TrainConfig =
        serde_json::from_value(value).map_err(|e| EvalError::Override { index, message: e.to_string() })?;
    config.validate().map_err(|e| EvalError::Override { index, message: e.to_string() })?;
    Ok(config)
}

/// Enabled components of a config, e.g. `MA+ADT+SGMC`.
pub fn flag_label(c: &TrainConfig) -> String {
    let flags: Vec<&str> = [(c.memory_enabled, "MA"), (c.adt_enabled, "ADT"), (c.sgmc_enabled, "SGMC")]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
    if flags.is_empty() {
        "none".into()
    } else {
        flags.join("+")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub summary: EvalSummary,
}

/// One table row: means over seeds, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config_id: String,
    pub flags: String,
    pub queue_len: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub tc_iou: f64,
    pub flicker: f64,
    pub fps: f64,
    pub per_seed: Vec<SeedResult>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn seeds(&self) -> usize {
        self.per_seed.len()
    }

    pub fn iou_range(&self) -> (f64, f64) {
        let ious = self.per_seed.iter().map(|s| s.summary.metrics.iou);
        (ious.clone().fold(f64::INFINITY, f64::min), ious.fold(f64::NEG_INFINITY, f64::max))
    }
}

fn row(config_id: String, config: &TrainConfig, per_seed: Vec<SeedResult>, error: Option<String>) -> AblationRow {
    let n = per_seed.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EvalSummary) -> f64| per_seed.iter().map(|s| f(&s.summary)).sum::<f64>() / n;
    AblationRow {
        config_id,
        flags: flag_label(config),
        queue_len: config.queue_len,
        precision: mean(&|s| s.metrics.precision),
        recall: mean(&|s| s.metrics.recall),
        f1: mean(&|s| s.metrics.f1),
        iou: mean(&|s| s.metrics.iou),
        tc_iou: mean(&|s| s.temporal.mean_consecutive_iou),
        flicker: mean(&|s| s.temporal.flicker_rate),
        fps: mean(&|s| s.mean_fps),
        per_seed,
        error,
    }
}

/// Train and evaluate one config over `seeds`.
pub fn evaluate_config(
    config: &TrainConfig,
    train: &[SequenceClip],
    test: &[SequenceClip],
    seeds: &[u64],
) -> Result<Vec<SeedResult>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..config.clone() };
            let outcome = train_on(cfg, train)?;
            let summary = evaluate(&outcome.model, &InferenceOptions::from(&outcome.config), test)?;
            log::info!("seed {seed}: iou {:.4}", summary.metrics.iou);
            Ok(SeedResult { seed, summary })
        })
        .collect()
}

/// Run the base config (empty grid) or every override. Failed rows carry their error.
pub fn run_ablation_on(
    base: &TrainConfig,
    grid: &[Override],
    train: &[SequenceClip],
    test: &[SequenceClip],
    seeds: &[u64],
) -> Vec<AblationRow> {
    let base_only = [Override { id: Some("base".into()), fields: Default::default() }];
    let grid = if grid.is_empty() { &base_only[..] } else { grid };
    grid.iter()
        .enumerate()
        .map(|(i, ov)| {
            let id = ov.id.clone().unwrap_or_else(|| format!("config{i}"));
            let config = match apply_override(base, ov, i) {
                Ok(c) => c,
                Err(e) => return row(id, base, Vec::new(), Some(e.to_string())),
            };
            match evaluate_config(&config, train, test, seeds) {
                Ok(per_seed) => row(id, &config, per_seed, None),
                Err(e) => row(id, &config, Vec::new(), Some(e.to_string())),
            }
        })
        .collect()
}

#[cfg(feature = "io")]
/// Load the train/test splits under `data_root` and run the grid with [`ABLATION_SEEDS`].
pub fn run_ablation(base: &TrainConfig, grid: &[Override], data_root: &Path) -> Result<Vec<AblationRow>> {
    use crate::data::{load_sequences, Split};
    let train = load_sequences(data_root, Split::Train).map_err(PipelineError::from)?;
    let test = load_sequences(data_root, Split::Test).map_err(PipelineError::from)?;
    Ok(run_ablation_on(base, grid, &train, &test, &ABLATION_SEEDS))
}

pub const ABLATION_HEADER: [&str; 16] = [
    "config_id", "flags", "queue_len", "precision", "recall", "f1", "iou", "tc_iou", "flicker", "fps", "seeds",
    "iou_min", "iou_max", "per_seed_iou", "per_seed_tc_iou", "error",
];

/// Write rows as CSV; metric columns in percent with two decimals.
pub fn write_ablation_csv<W: std::io::Write>(rows: &[AblationRow], out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_HEADER)?;
    let f = |v: f64| format!("{:.2}", v * 100.0);
    for r in rows {
        let (lo, hi) = r.iou_range();
        let joined = |get: &dyn Fn(&EvalSummary) -> f64| {
            r.per_seed.iter().map(|s| format!("{}:{}", s.seed, f(get(&s.summary)))).collect::<Vec<_>>().join(";")
        };
        let ok = r.error.is_none();
        let metric = |v: f64| if ok { f(v) } else { String::new() };
        w.write_record([
            r.config_id.clone(),
            r.flags.clone(),
            r.queue_len.to_string(),
            metric(r.precision),
            metric(r.recall),
            metric(r.f1),
            metric(r.iou),
            metric(r.tc_iou),
            metric(r.flicker),
            if ok { format!("{:.2}", r.fps) } else { String::new() },
            r.seeds().to_string(),
            metric(lo),
            metric(hi),
            joined(&|s| s.metrics.iou),
            joined(&|s| s.temporal.mean_consecutive_iou),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-flag IoU means, handy for summaries.
pub fn iou_by_flags(rows: &[AblationRow]) -> BTreeMap<String, f64> {
    rows.iter().filter(|r| r.error.is_none()).map(|r| (r.flags.clone(), r.iou)).collect()
}
