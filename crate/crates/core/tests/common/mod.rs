#![allow(dead_code)]

use ironet_core::data::{generate_sequence, SequenceClip, SyntheticSpec};
use ironet_core::decoder::DecoderConfig;
use ironet_core::encoder::EncoderConfig;
use ironet_core::pipeline::{ModelConfig, TrainConfig};
use ironet_core::temporal::TemporalConfig;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 16,
            depth: 2,
            heads: 2,
            pool_bins: vec![1, 2],
            pos_grid: 4,
            ..Default::default()
        },
        temporal: TemporalConfig { blocks: 1, heads: 2, mlp_ratio: 2 },
        decoder: DecoderConfig { depth: 1, heads: 2, mlp_ratio: 2 },
    }
}

pub fn tiny_spec(n_sequences: usize, occlusion_prob: f64) -> SyntheticSpec {
    SyntheticSpec {
        n_sequences,
        frames_per_sequence: 14,
        height: 32,
        width: 32,
        occlusion_prob,
        occlusion_len: 3,
        ..Default::default()
    }
}

pub fn tiny_sequences(n: usize, occlusion_prob: f64) -> Vec<SequenceClip> {
    let spec = tiny_spec(n, occlusion_prob);
    (0..n).map(|i| generate_sequence(&spec, i).unwrap()).collect()
}

pub fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        clips_per_sequence: 2,
        warmup_steps: 2,
        model: tiny_model(),
        ..Default::default()
    }
}
