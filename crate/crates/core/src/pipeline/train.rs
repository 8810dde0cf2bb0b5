#[cfg(feature = "io")]
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[cfg(feature = "io")]
use super::checkpoint::save_checkpoint;
use super::checkpoint::{Checkpoint, TrainMetadata};
use super::infer::{bootstrap_entry, detached_refs, memory_entry};
use super::optim::AdamW;
use super::{Model, ModelConfig, PipelineError, Result};
use crate::data::{augment_clip, sample_training_clip, AugmentParams, SequenceClip};
use crate::decoder::{adt_target, sample_task, sgmc_tokens, AdtTask};
use crate::layers::G;
use crate::numerics::Tensor;
use crate::temporal::{curriculum_source, CurriculumState, MaskSource, MemoryBank, MemoryRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub queue_len: usize,
    pub tau: f64,
    pub intervals: Vec<usize>,
    pub seed: u64,
    pub adt_enabled: bool,
    pub memory_enabled: bool,
    pub sgmc_enabled: bool,
    /// Clips drawn from each training sequence per epoch.
    pub clips_per_sequence: usize,
    /// Probability that a clip is cut to its first frame, decoded against the bootstrap entry only.
    pub onset_prob: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub supervise_all_frames: bool,
    pub inference_interval: usize,
    pub augment: AugmentParams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 16,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            batch_size: 4,
            queue_len: 3,
            tau: 0.05,
            intervals: vec![1, 2, 3, 4],
            seed: 0,
            adt_enabled: true,
            memory_enabled: true,
            sgmc_enabled: true,
            clips_per_sequence: 8,
            onset_prob: 0.5,
            warmup_steps: 20,
            grad_clip: 1.0,
            supervise_all_frames: false,
            inference_interval: 1,
            augment: AugmentParams { scale_min: 1.0, scale_max: 1.25, crop: None, hflip_prob: 0.5 },
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.queue_len == 0 {
            return bad("queue_len must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if self.intervals.is_empty() || self.intervals.contains(&0) {
            return bad("intervals must be non-empty and positive");
        }
        if self.batch_size == 0 || self.clips_per_sequence == 0 {
            return bad("batch_size and clips_per_sequence must be positive");
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        if !(0.0..=1.0).contains(&self.onset_prob) {
            return bad("onset_prob must lie in [0, 1]");
        }
        self.model.encoder.validate()?;
        Ok(())
    }

    /// Frames a training sequence must have.
    pub fn min_sequence_len(&self) -> usize {
        self.queue_len * self.intervals.iter().max().copied().unwrap_or(1) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub clips: usize,
    pub foreground_clips: usize,
    pub background_clips: usize,
    pub onset_clips: usize,
    /// Sum over steps of the gradient norm reaching each semantic token.
    pub freespace_token_grad: f64,
    pub background_token_grad: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub config: TrainConfig,
    pub log: Vec<EpochLog>,
    pub metadata: TrainMetadata,
    /// Task drawn for every clip, in order.
    pub task_log: Vec<AdtTask>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.model, self.config.clone(), self.metadata.clone())
    }
}

/// Mean freespace pixel fraction over every mask of `sequences`.
pub fn freespace_frequency(sequences: &[SequenceClip]) -> f64 {
    let (mut ones, mut total) = (0usize, 0usize);
    for m in sequences.iter().flat_map(|s| &s.masks) {
        ones += m.data().iter().filter(|&&v| v > 0.5).count();
        total += m.len();
    }
    if total == 0 {
        0.0
    } else {
        ones as f64 / total as f64
    }
}

fn reencoded_refs(g: &mut G, model: &Model, bank: &MemoryBank) -> Result<Vec<MemoryRef>> {
    bank.entries()
        .map(|e| {
            let src = e.source.as_ref().expect("training entries keep their source");
            let f = g.constant(src.features.clone());
            let m = g.constant(src.pooled_mask.clone());
            let tokens = model.memory_encoder.encode(g, &model.params, f, m)?;
            Ok(MemoryRef { tokens, timestamp: e.timestamp })
        })
        .collect()
}

/// Stateful training loop; exposed so tests can drive individual steps.
pub struct Trainer<'d> {
    pub model: Model,
    pub config: TrainConfig,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    data: &'d [SequenceClip],
    pub freespace_frequency: f64,
    steps_done: usize,
    total_steps: usize,
    pub task_log: Vec<AdtTask>,
}

struct ClipStats {
    loss: f64,
    onset: bool,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, data: &'d [SequenceClip]) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        let need = config.min_sequence_len();
        if let Some(s) = data.iter().find(|s| s.len() < need) {
            return Err(PipelineError::Config(format!(
                "sequence `{}` has {} frames; clips need {need}",
                s.sequence_id,
                s.len()
            )));
        }
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(&model.params, config.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let total_steps = config.epochs * (data.len() * config.clips_per_sequence).div_ceil(config.batch_size);
        Ok(Trainer {
            freespace_frequency: freespace_frequency(data),
            model,
            config,
            optimizer,
            rng,
            data,
            steps_done: 0,
            total_steps: total_steps.max(1),
            task_log: Vec::new(),
        })
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn progress(&self) -> f64 {
        self.steps_done as f64 / self.total_steps as f64
    }

    fn learning_rate(&self) -> f64 {
        let warm = ((self.steps_done + 1) as f64 / self.config.warmup_steps.max(1) as f64).min(1.0);
        let cosine = 0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * self.progress()).cos());
        self.config.learning_rate * warm * cosine
    }

    /// Forward one clip and accumulate its gradients scaled by `weight`.
    fn run_clip(&mut self, clip: &SequenceClip, task: AdtTask, onset: bool, weight: f64) -> Result<ClipStats> {
        let cfg = &self.config;
        let masks: Vec<Tensor<f32>> = clip.masks.iter().map(|m| adt_target(m, task)).collect::<std::result::Result<_, _>>()?;
        let n_frames = if onset { 1 } else { clip.len() };
        let n_supervised = if cfg.supervise_all_frames { n_frames } else { 1 };
        let curriculum = CurriculumState::at(self.steps_done as f64 / self.total_steps as f64);
        let mut bank = MemoryBank::new(cfg.queue_len);
        let mut loss_sum = 0.0;
        for t in 0..n_frames {
            let model = &self.model;
            let frame = &clip.frames[t];
            let last = t + 1 == n_frames;
            let supervise = last || cfg.supervise_all_frames;
            if !cfg.memory_enabled && !supervise {
                continue;
            }
            let (h, w) = (frame.height(), frame.width());
            let mut g = G::new();
            let pyramid = model.features(&mut g, &frame.image)?;
            let f0 = g.value(pyramid.levels[0]).clone();
            if cfg.memory_enabled && t == 0 {
                bank.push(bootstrap_entry(model, &f0, (h, w), frame.timestamp)?)?;
            }
            let source = if cfg.memory_enabled && !last {
                curriculum_source(&curriculum, &mut self.rng)
            } else {
                MaskSource::GroundTruth
            };
            let mut stored = None;
            if supervise || source == MaskSource::Predicted {
                let tokens = if cfg.sgmc_enabled {
                    sgmc_tokens(bank.coverage_ratio(), cfg.tau, task, &model.decoder.tokens)
                } else {
                    vec![model.decoder.tokens.mask]
                };
                let memory = if !cfg.memory_enabled {
                    None
                } else if supervise {
                    Some(reencoded_refs(&mut g, model, &bank)?)
                } else {
                    Some(detached_refs(&mut g, &bank))
                };
                let logits = model.decode(&mut g, &pyramid, memory.as_deref(), frame.timestamp, &tokens, (h, w))?;
                if source == MaskSource::Predicted {
                    let probs = g.value(logits).map(|z| crate::numerics::kernels::sigmoid(z));
                    stored = Some(probs.map(|p| if p > 0.5 { 1.0 } else { 0.0 }));
                }
                if supervise {
                    let loss = g.sigmoid_bce(logits, &masks[t])?;
                    let value = g.value(loss).data()[0] as f64;
                    if !value.is_finite() {
                        return Err(PipelineError::Divergence { step: self.steps_done, dump: None });
                    }
                    loss_sum += value;
                    let scaled = g.scale(loss, weight / n_supervised as f64)?;
                    let grads = g.backward(scaled)?;
                    g.accumulate_param_grads(&grads, &mut self.model.params);
                }
            }
            drop(g);
            if cfg.memory_enabled && !last {
                let mask = stored.unwrap_or_else(|| masks[t].clone());
                bank.push(memory_entry(&self.model, &f0, &mask, frame.timestamp)?)?;
            }
        }
        Ok(ClipStats { loss: loss_sum / n_supervised as f64, onset })
    }

    fn draw_task(&mut self) -> Result<AdtTask> {
        if self.config.adt_enabled {
            Ok(sample_task(self.freespace_frequency, &mut self.rng)?)
        } else {
            Ok(AdtTask::Foreground)
        }
    }

    /// One optimizer step over the given sequences (one clip each). Returns mean loss.
    pub fn step(&mut self, sequences: &[&SequenceClip], stats: &mut EpochLog) -> Result<f64> {
        debug_assert_eq!(self.model.params.grad_norm(), 0.0, "gradients leaked across steps");
        let weight = 1.0 / sequences.len() as f64;
        let mut loss = 0.0;
        for seq in sequences {
            let clip = sample_training_clip(seq, self.config.queue_len, &self.config.intervals, &mut self.rng)?;
            let clip = augment_clip(&clip, &self.config.augment, self.rng.random())?;
            let task = self.draw_task()?;
            let onset = self.config.memory_enabled && self.rng.random_bool(self.config.onset_prob);
            self.task_log.push(task);
            let s = self.run_clip(&clip, task, onset, weight)?;
            loss += s.loss * weight;
            stats.clips += 1;
            stats.onset_clips += s.onset as usize;
            match task {
                AdtTask::Foreground => stats.foreground_clips += 1,
                AdtTask::Background => stats.background_clips += 1,
            }
        }
        let tokens = self.model.decoder.tokens;
        let norm = |id| self.model.params.grad(id).data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        stats.freespace_token_grad += norm(tokens.freespace);
        stats.background_token_grad += norm(tokens.background);
        let total = self.model.params.grad_norm();
        if self.config.grad_clip > 0.0 && total > self.config.grad_clip {
            let s = (self.config.grad_clip / total) as f32;
            for p in self.model.params.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = self.learning_rate();
        stats.learning_rate = lr;
        self.optimizer.step(&mut self.model.params, lr);
        self.model.params.zero_grads();
        self.steps_done += 1;
        stats.steps += 1;
        Ok(loss)
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochLog> {
        let start = Instant::now();
        let data = self.data;
        let mut order: Vec<&SequenceClip> = data.iter().flat_map(|s| std::iter::repeat_n(s, self.config.clips_per_sequence)).collect();
        order.shuffle(&mut self.rng);
        let mut log = EpochLog {
            epoch,
            mean_loss: 0.0,
            steps: 0,
            clips: 0,
            foreground_clips: 0,
            background_clips: 0,
            onset_clips: 0,
            freespace_token_grad: 0.0,
            background_token_grad: 0.0,
            learning_rate: 0.0,
            seconds: 0.0,
        };
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            loss_sum += self.step(batch, &mut log)?;
        }
        log.mean_loss = loss_sum / log.steps.max(1) as f64;
        log.seconds = start.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: loss {:.4} over {} steps ({:.1}s)",
            log.mean_loss,
            log.steps,
            log.seconds
        );
        Ok(log)
    }

    pub fn finish(self, log: Vec<EpochLog>) -> TrainOutcome {
        let metadata = TrainMetadata {
            epochs_completed: log.len(),
            steps: self.steps_done,
            seed: self.config.seed,
            loss_curve: log.iter().map(|e| e.mean_loss).collect(),
            freespace_frequency: self.freespace_frequency,
        };
        TrainOutcome { model: self.model, config: self.config, log, metadata, task_log: self.task_log }
    }
}

/// Train on in-memory sequences.
pub fn train_on(config: TrainConfig, sequences: &[SequenceClip]) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, sequences)?;
    let mut log = Vec::new();
    for epoch in 0..trainer.config.epochs {
        log.push(trainer.run_epoch(epoch)?);
    }
    Ok(trainer.finish(log))
}

#[cfg(feature = "io")]
/// Train on the train split under `data_root`, writing the checkpoint to `out` and a
/// per-epoch JSON-lines log next to it.
pub fn train(config: TrainConfig, data_root: &Path, out: &Path) -> Result<TrainOutcome> {
    let sequences = crate::data::load_sequences(data_root, crate::data::Split::Train)?;
    let mut trainer = Trainer::new(config, &sequences)?;
    let mut log = Vec::new();
    let log_path = out.with_extension("log.jsonl");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::data::DataError::Io { path: dir.to_path_buf(), source: e })?;
    }
    let mut lines = String::new();
    for epoch in 0..trainer.config.epochs {
        match trainer.run_epoch(epoch) {
            Ok(entry) => {
                lines.push_str(&serde_json::to_string(&entry).expect("log serialises"));
                lines.push('\n');
                std::fs::write(&log_path, &lines).map_err(|e| crate::data::DataError::Io { path: log_path.clone(), source: e })?;
                log.push(entry);
            }
            Err(PipelineError::Divergence { step, .. }) => {
                let dump = out.with_extension("diverged.ckpt");
                let partial = Trainer::finish_ref(&trainer, &log);
                save_checkpoint(&partial, &dump)?;
                return Err(PipelineError::Divergence { step, dump: Some(dump) });
            }
            Err(e) => return Err(e),
        }
    }
    let outcome = trainer.finish(log);
    save_checkpoint(&outcome.checkpoint(), out)?;
    Ok(outcome)
}

impl Trainer<'_> {
    #[cfg(feature = "io")]
    fn finish_ref(&self, log: &[EpochLog]) -> Checkpoint {
        let metadata = TrainMetadata {
            epochs_completed: log.len(),
            steps: self.steps_done,
            seed: self.config.seed,
            loss_curve: log.iter().map(|e| e.mean_loss).collect(),
            freespace_frequency: self.freespace_frequency,
        };
        Checkpoint::new(&self.model, self.config.clone(), metadata)
    }
}
