//! Sequences of frames and freespace masks: the synthetic generator, the on-disk
//! dataset layout, temporal downsampling, clip-consistent augmentation and
//! multi-interval clip sampling.

mod augment;
#[cfg(feature = "io")]
mod layout;
mod sampling;
mod synthetic;

pub use augment::{augment_clip, augment_clip_with_draw, AugmentDraw, AugmentParams};
#[cfg(feature = "io")]
pub use layout::{
    generate_synthetic_dataset, load_frames_dir, load_sequence_dir, load_sequences, write_mask, write_sequence, DatasetSummary,
    Split, Splits,
};
pub use sampling::{clip_indices, sample_training_clip, select_frames, temporal_downsample};
pub use synthetic::{generate_sequence, split_counts, SyntheticSpec};

use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::Tensor;

/// Encoder patch size the data contracts are checked against.
pub const PATCH_SIZE: usize = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("sequence `{sequence}`: missing mask for frame {index}")]
    MissingMask { sequence: String, index: usize },
    #[error("sequence `{sequence}`: timestamps not strictly increasing at index {index}")]
    NonMonotonicTimestamps { sequence: String, index: usize },
    #[error("unknown sequence id `{0}` in split file")]
    UnknownSequence(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("dataset layout: {0}")]
    Layout(String),
    #[error("crop {crop_h}x{crop_w} larger than frame {frame_h}x{frame_w}")]
    CropTooLarge { crop_h: usize, crop_w: usize, frame_h: usize, frame_w: usize },
    #[error("sequence of {got} frames too short; need at least {needed}")]
    SequenceTooShort { needed: usize, got: usize },
    #[error("invalid rate: {0}")]
    InvalidRate(String),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
}

/// One image with its capture time. `image` is `[1, H, W]` (IR) or `[3, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Tensor<f32>,
    pub timestamp: f64,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }

    pub fn channels(&self) -> usize {
        self.image.dim(0)
    }
}

/// Ordered frames with index-aligned binary `[H, W]` masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceClip {
    pub sequence_id: String,
    pub frames: Vec<Frame>,
    pub masks: Vec<Tensor<f32>>,
    pub is_training_clip: bool,
}

impl SequenceClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    pub fn size(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.height(), f.width()))
    }

    /// Check the clip invariants: aligned masks, shared size, increasing time, binary masks.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.frames.len() != self.masks.len() {
            return Err(DataError::InvalidClip(format!(
                "{} frames but {} masks",
                self.frames.len(),
                self.masks.len()
            )));
        }
        let Some((h, w)) = self.size() else { return Ok(()) };
        for (i, (f, m)) in self.frames.iter().zip(&self.masks).enumerate() {
            if f.height() != h || f.width() != w || m.shape() != [h, w] {
                return Err(DataError::InvalidClip(format!("frame {i} size differs from {h}x{w}")));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(DataError::InvalidClip(format!("mask {i} is not binary")));
            }
        }
        for (i, pair) in self.frames.windows(2).enumerate() {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(DataError::NonMonotonicTimestamps {
                    sequence: self.sequence_id.clone(),
                    index: i + 1,
                });
            }
        }
        Ok(())
    }
}

/// Fraction of ones in a binary mask.
pub fn freespace_fraction(mask: &Tensor<f32>) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let ones = mask.data().iter().filter(|&&v| v > 0.5).count();
    ones as f64 / mask.len() as f64
}
