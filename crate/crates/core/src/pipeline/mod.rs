//! Model assembly, the training loop, streaming inference and checkpoints.

mod checkpoint;
mod infer;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, TrainMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use infer::{streaming_infer, InferenceOptions, InferenceResult, StreamSession};
pub use optim::AdamW;
#[cfg(feature = "io")]
pub use train::train;
pub use train::{train_on, EpochLog, TrainConfig, TrainOutcome, Trainer};

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::decoder::{DecoderConfig, DecoderError, MaskDecoder};
use crate::encoder::{Encoder, EncoderConfig, EncoderError, FeaturePyramid};
use crate::layers::{Store, G};
use crate::numerics::{NumericsError, ParamId, Tensor, Var};
use crate::temporal::{MemoryAttention, MemoryEncoder, MemoryRef, TemporalConfig, TemporalError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training sequences")]
    EmptyDataset,
    #[error("non-finite loss at step {step}{}", dump.as_ref().map(|p| format!("; state written to {}", p.display())).unwrap_or_default())]
    Divergence { step: usize, dump: Option<PathBuf> },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub temporal: TemporalConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn channels(&self) -> Vec<usize> {
        (0..self.encoder.pyramid_levels).map(|i| self.encoder.level_channels(i)).collect()
    }

    pub fn param_count(&self) -> usize {
        let c0 = self.encoder.embed_dim;
        self.encoder.param_count()
            + MemoryEncoder::param_count(c0)
            + MemoryAttention::param_count(&self.temporal, c0)
            + MaskDecoder::param_count(&self.decoder, &self.channels())
    }
}

/// All trainable parts plus their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Store,
    pub encoder: Encoder,
    pub memory_encoder: MemoryEncoder,
    pub memory_attention: MemoryAttention,
    pub decoder: MaskDecoder,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Store::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut params, &mut rng)?;
        let c0 = config.encoder.embed_dim;
        let memory_encoder = MemoryEncoder::new(&mut params, c0, &mut rng)?;
        let memory_attention = MemoryAttention::new(&mut params, config.temporal.clone(), c0, &mut rng)?;
        let decoder = MaskDecoder::new(&mut params, config.decoder.clone(), &config.channels(), &mut rng)?;
        Ok(Model { config, params, encoder, memory_encoder, memory_attention, decoder })
    }

    pub fn patch_size(&self) -> usize {
        self.config.encoder.patch_size
    }

    /// Encoder and pyramid for one image.
    pub fn features(&self, g: &mut G, image: &Tensor<f32>) -> Result<FeaturePyramid> {
        let enc = self.encoder.encode(g, &self.params, image)?;
        Ok(self.encoder.pyramid(g, &self.params, &enc)?)
    }

    /// Enrich the deepest level with `memory` (skipped entirely when `None`) and decode logits.
    pub fn decode(
        &self,
        g: &mut G,
        pyramid: &FeaturePyramid,
        memory: Option<&[MemoryRef]>,
        timestamp: f64,
        tokens: &[ParamId],
        out: (usize, usize),
    ) -> Result<Var> {
        let f0 = pyramid.levels[0];
        let enriched = match memory {
            Some(m) => self.memory_attention.enrich(g, &self.params, f0, m, timestamp)?,
            None => f0,
        };
        Ok(self.decoder.decode_logits(g, &self.params, enriched, tokens, pyramid, out.0, out.1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_closed_form() {
        let m = Model::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.params.numel(), m.config.param_count());
    }

    #[test]
    fn construction_is_seeded() {
        let a = Model::new(ModelConfig::default(), 3).unwrap();
        let b = Model::new(ModelConfig::default(), 3).unwrap();
        let c = Model::new(ModelConfig::default(), 4).unwrap();
        let vals = |m: &Model| m.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }
}
