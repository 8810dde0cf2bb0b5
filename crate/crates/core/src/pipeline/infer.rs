use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Model, Result, TrainConfig};
use crate::data::{Frame, SequenceClip};
use crate::decoder::{sgmc_tokens, AdtTask, PredictionRecord};
use crate::layers::G;
use crate::numerics::{kernels, Tensor};
use crate::temporal::{MemoryBank, MemoryEntry, MemoryRef};

/// Offset of the empty-mask entry placed in the bank before a sequence's first frame.
pub(crate) const BOOTSTRAP_OFFSET_S: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub queue_len: usize,
    pub tau: f64,
    pub memory_enabled: bool,
    pub sgmc_enabled: bool,
    /// Store every `interval`-th prediction in the bank.
    pub interval: usize,
}

impl From<&TrainConfig> for InferenceOptions {
    fn from(c: &TrainConfig) -> Self {
        InferenceOptions {
            queue_len: c.queue_len,
            tau: c.tau,
            memory_enabled: c.memory_enabled,
            sgmc_enabled: c.sgmc_enabled,
            interval: c.inference_interval.max(1),
        }
    }
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions::from(&TrainConfig::default())
    }
}

/// Memory entry built from deepest features and a full-resolution binary mask.
pub(crate) fn memory_entry(model: &Model, f0: &Tensor<f32>, mask: &Tensor<f32>, timestamp: f64) -> Result<MemoryEntry> {
    Ok(model.memory_encoder.encode_entry(&model.params, f0, mask, timestamp)?)
}

/// Empty-mask entry used to open a sequence.
pub(crate) fn bootstrap_entry(model: &Model, f0: &Tensor<f32>, size: (usize, usize), first_timestamp: f64) -> Result<MemoryEntry> {
    memory_entry(model, f0, &Tensor::zeros(&[size.0, size.1]), first_timestamp - BOOTSTRAP_OFFSET_S)
}

pub(crate) fn detached_refs(g: &mut G, bank: &MemoryBank) -> Vec<MemoryRef> {
    bank.entries()
        .map(|e| MemoryRef { tokens: g.constant(e.tokens.clone()), timestamp: e.timestamp })
        .collect()
}

/// One stream: owns its memory bank.
pub struct StreamSession<'m> {
    model: &'m Model,
    options: InferenceOptions,
    bank: MemoryBank,
    frames_seen: usize,
}

impl<'m> StreamSession<'m> {
    pub fn new(model: &'m Model, options: InferenceOptions) -> Self {
        let bank = MemoryBank::new(options.queue_len.max(1));
        StreamSession { model, options, bank, frames_seen: 0 }
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn reset(&mut self) {
        self.bank.reset();
        self.frames_seen = 0;
    }

    /// Predict one frame whose size is a multiple of the patch size, then update memory.
    pub fn process(&mut self, frame: &Frame) -> Result<PredictionRecord> {
        let start = Instant::now();
        let model = self.model;
        let (h, w) = (frame.height(), frame.width());
        let mut g = G::new();
        let pyramid = model.features(&mut g, &frame.image)?;
        let f0 = g.value(pyramid.levels[0]).clone();
        if self.options.memory_enabled && self.frames_seen == 0 {
            self.bank.push(bootstrap_entry(model, &f0, (h, w), frame.timestamp)?)?;
        }
        let coverage = self.bank.coverage_ratio();
        let tokens = if self.options.sgmc_enabled {
            sgmc_tokens(coverage, self.options.tau, AdtTask::Foreground, &model.decoder.tokens)
        } else {
            vec![model.decoder.tokens.mask]
        };
        let sgmc_active = tokens.len() > 1;
        let memory = self.options.memory_enabled.then(|| detached_refs(&mut g, &self.bank));
        let logits = model.decode(&mut g, &pyramid, memory.as_deref(), frame.timestamp, &tokens, (h, w))?;
        let probs = g.sigmoid(logits)?;
        let record = PredictionRecord::new(g.take_value(probs), 0.0, sgmc_active);
        drop(g);
        if self.options.memory_enabled && self.frames_seen % self.options.interval == 0 {
            self.bank.push(memory_entry(model, &f0, &record.binary_mask, frame.timestamp)?)?;
        }
        self.frames_seen += 1;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(PredictionRecord { latency_ms, ..record })
    }
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub records: Vec<PredictionRecord>,
    /// Mean frames per second over all frames but the first.
    pub mean_fps: f64,
    pub warnings: Vec<String>,
}

fn resize_plane(data: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    kernels::resize_forward(data, c, h, w, oh, ow)
}

/// Predict every frame of `sequence` in order with a fresh bank.
pub fn streaming_infer(model: &Model, options: &InferenceOptions, sequence: &SequenceClip) -> Result<InferenceResult> {
    let p = model.patch_size();
    let mut session = StreamSession::new(model, options.clone());
    let mut records = Vec::with_capacity(sequence.len());
    let mut warnings = Vec::new();
    for (i, frame) in sequence.frames.iter().enumerate() {
        let (c, h, w) = (frame.channels(), frame.height(), frame.width());
        if h % p == 0 && w % p == 0 {
            records.push(session.process(frame)?);
            continue;
        }
        let (rh, rw) = (((h + p / 2) / p).max(1) * p, ((w + p / 2) / p).max(1) * p);
        if i == 0 {
            warnings.push(format!(
                "sequence `{}`: {h}x{w} frames are not divisible by patch size {p}; resized to {rh}x{rw}",
                sequence.sequence_id
            ));
        }
        let resized = Frame {
            image: Tensor::new(&[c, rh, rw], resize_plane(frame.image.data(), c, h, w, rh, rw))?,
            timestamp: frame.timestamp,
        };
        let rec = session.process(&resized)?;
        let probs = Tensor::new(&[h, w], resize_plane(rec.probabilities.data(), 1, rh, rw, h, w))?;
        records.push(PredictionRecord::new(probs, rec.latency_ms, rec.sgmc_active));
    }
    session.reset();
    let timed: f64 = records.iter().skip(1).map(|r| r.latency_ms).sum();
    let mean_fps = if records.len() > 1 && timed > 0.0 { (records.len() - 1) as f64 / (timed / 1e3) } else { 0.0 };
    Ok(InferenceResult { records, mean_fps, warnings })
}
