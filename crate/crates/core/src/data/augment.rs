use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Frame, SequenceClip, PATCH_SIZE};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Output `(height, width)`. `None` keeps the source size when the scale range
    /// never shrinks, and otherwise takes the largest patch-aligned window that fits.
    pub crop: Option<(usize, usize)>,
    pub hflip_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { scale_min: 0.75, scale_max: 1.25, crop: None, hflip_prob: 0.5 }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { scale_min: 1.0, scale_max: 1.0, crop: None, hflip_prob: 0.0 }
    }
}

/// The single transform drawn for a clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub scaled_h: usize,
    pub scaled_w: usize,
    pub offset_y: usize,
    pub offset_x: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip: bool,
}

fn scaled(n: usize, s: f64) -> usize {
    ((n as f64 * s).round() as usize).max(1)
}

fn draw(params: &AugmentParams, h: usize, w: usize, seed: u64) -> Result<AugmentDraw, DataError> {
    let (lo, hi) = (params.scale_min.min(params.scale_max), params.scale_min.max(params.scale_max));
    if !(lo > 0.0) {
        return Err(DataError::InvalidClip(format!("scale range [{lo}, {hi}] must be positive")));
    }
    let fit = |n: usize| {
        let m = scaled(n, lo);
        if m >= PATCH_SIZE { m / PATCH_SIZE * PATCH_SIZE } else { m }
    };
    let (crop_h, crop_w) = params.crop.unwrap_or(if lo >= 1.0 { (h, w) } else { (fit(h), fit(w)) });
    // The crop has to fit whatever scale is drawn.
    if crop_h > scaled(h, lo) || crop_w > scaled(w, lo) || crop_h == 0 || crop_w == 0 {
        return Err(DataError::CropTooLarge { crop_h, crop_w, frame_h: scaled(h, lo), frame_w: scaled(w, lo) });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (scaled_h, scaled_w) = (scaled(h, s), scaled(w, s));
    let offset_y = rng.random_range(0..=scaled_h - crop_h);
    let offset_x = rng.random_range(0..=scaled_w - crop_w);
    let flip = rng.random_bool(params.hflip_prob.clamp(0.0, 1.0));
    Ok(AugmentDraw { scaled_h, scaled_w, offset_y, offset_x, crop_h, crop_w, flip })
}

/// Source coordinate of output index `i` on an axis resized from `src` to `dst`, half-pixel centred.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

impl AugmentDraw {
    fn out_x(&self, x: usize) -> usize {
        let x = if self.flip { self.crop_w - 1 - x } else { x };
        x + self.offset_x
    }

    fn apply_image(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
        let src = img.data();
        let taps = |i: usize, n: usize, m: usize| {
            let p = source_coord(i, n, m).clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (p - i0 as f64) as f32)
        };
        let ys: Vec<_> = (0..self.crop_h).map(|y| taps(y + self.offset_y, h, self.scaled_h)).collect();
        let xs: Vec<_> = (0..self.crop_w).map(|x| taps(self.out_x(x), w, self.scaled_w)).collect();
        let mut out = Vec::with_capacity(c * self.crop_h * self.crop_w);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Tensor::new(&[c, self.crop_h, self.crop_w], out).expect("augmented frame shape")
    }

    fn apply_mask(&self, mask: &Tensor<f32>) -> Tensor<f32> {
        let (h, w) = (mask.dim(0), mask.dim(1));
        let near = |i: usize, n: usize, m: usize| (((i as f64 + 0.5) * n as f64 / m as f64) as usize).min(n - 1);
        let ys: Vec<usize> = (0..self.crop_h).map(|y| near(y + self.offset_y, h, self.scaled_h)).collect();
        let xs: Vec<usize> = (0..self.crop_w).map(|x| near(self.out_x(x), w, self.scaled_w)).collect();
        let src = mask.data();
        let data = ys.iter().flat_map(|&y| xs.iter().map(move |&x| src[y * w + x])).collect();
        Tensor::new(&[self.crop_h, self.crop_w], data).expect("augmented mask shape")
    }
}

/// Augment a clip, also returning the transform that was drawn.
pub fn augment_clip_with_draw(
    clip: &SequenceClip,
    params: &AugmentParams,
    seed: u64,
) -> Result<(SequenceClip, AugmentDraw), DataError> {
    let Some((h, w)) = clip.size() else {
        return Err(DataError::InvalidClip("cannot augment an empty clip".into()));
    };
    let d = draw(params, h, w, seed)?;
    let frames = clip
        .frames
        .iter()
        .map(|f| Frame { image: d.apply_image(&f.image), timestamp: f.timestamp })
        .collect();
    let masks = clip.masks.iter().map(|m| d.apply_mask(m)).collect();
    Ok((
        SequenceClip {
            sequence_id: clip.sequence_id.clone(),
            frames,
            masks,
            is_training_clip: clip.is_training_clip,
        },
        d,
    ))
}

/// Random scale, crop and horizontal flip, drawn once per clip from `seed`.
pub fn augment_clip(clip: &SequenceClip, params: &AugmentParams, seed: u64) -> Result<SequenceClip, DataError> {
    augment_clip_with_draw(clip, params, seed).map(|(c, _)| c)
}
