//! Procedural off-road sequences: a trapezoidal corridor whose far end wanders,
//! over drifting low-contrast sinusoidal clutter and white noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Frame, SequenceClip, PATCH_SIZE};
use crate::numerics::Tensor;

const TEXTURE_WAVES: usize = 6;
const BACKGROUND_LEVEL: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_sequences: usize,
    pub frames_per_sequence: usize,
    pub height: usize,
    pub width: usize,
    pub road_contrast: f64,
    pub noise_sigma: f64,
    /// Std-dev of the per-frame change in the far-end drift velocity, as a fraction of width.
    pub turn_rate: f64,
    /// Per-sequence probability of one occlusion run.
    pub occlusion_prob: f64,
    pub occlusion_len: usize,
    pub jitter_px: usize,
    /// RMS amplitude of the sinusoidal background clutter.
    pub texture_amplitude: f64,
    /// Per-frame phase random-walk step of the clutter, in radians.
    pub texture_drift: f64,
    /// Per-frame probability of a fade: the road stays in the mask but its contrast
    /// drops to `fade_level * road_contrast` (thermal crossover).
    pub fade_prob: f64,
    pub fade_level: f64,
    pub frame_rate_hz: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_sequences: 25,
            frames_per_sequence: 40,
            height: 128,
            width: 128,
            road_contrast: 0.15,
            noise_sigma: 0.10,
            turn_rate: 0.01,
            occlusion_prob: 0.5,
            occlusion_len: 5,
            jitter_px: 2,
            texture_amplitude: 0.06,
            texture_drift: 0.8,
            fade_prob: 0.0,
            fade_level: 0.2,
            frame_rate_hz: 2.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.width < 4 * PATCH_SIZE || self.height < 4 * PATCH_SIZE {
            return bad(&format!(
                "frame {}x{} smaller than 4x the patch size ({PATCH_SIZE})",
                self.height, self.width
            ));
        }
        if self.n_sequences == 0 || self.frames_per_sequence < 2 {
            return bad("need at least one sequence of two frames");
        }
        if self.occlusion_len >= self.frames_per_sequence {
            return bad("occlusion_len must be shorter than the sequence");
        }
        if self.road_contrast <= 0.0 || !self.road_contrast.is_finite() {
            return bad("road_contrast must be positive");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad("occlusion_prob must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.fade_prob) || !(0.0..=1.0).contains(&self.fade_level) {
            return bad("fade_prob and fade_level must lie in [0, 1]");
        }
        if self.noise_sigma < 0.0 || self.turn_rate < 0.0 || self.texture_amplitude < 0.0 {
            return bad("noise, turn rate and texture amplitude must be non-negative");
        }
        if self.frame_rate_hz <= 0.0 {
            return bad("frame_rate_hz must be positive");
        }
        Ok(())
    }
}

/// `(train, test)` sequence counts for a roughly 80/20 split.
pub fn split_counts(n: usize) -> (usize, usize) {
    let test = if n < 2 { 0 } else { ((n as f64 * 0.2).round() as usize).max(1) };
    (n - test, test)
}

struct Wave {
    kx: f64,
    ky: f64,
    amp: f64,
    phase: f64,
}

struct Road {
    horizon: f64,
    half_bottom: f64,
    half_top: f64,
    bottom_x: f64,
    far_offset: f64,
    velocity: f64,
}

impl Road {
    fn contains(&self, ys: f64, xs: f64, h: f64, w: f64) -> bool {
        let top = self.horizon * h;
        if ys < top {
            return false;
        }
        let s = ((h - 1.0 - ys) / (h - 1.0 - top)).clamp(0.0, 1.0);
        let centre = (self.bottom_x + self.far_offset * s * s) * w;
        let half = (self.half_bottom + (self.half_top - self.half_bottom) * s) * w;
        (xs - centre).abs() <= half
    }

    fn step(&mut self, turn_rate: f64, rng: &mut ChaCha8Rng) {
        if turn_rate > 0.0 {
            let n = Normal::new(0.0, turn_rate).unwrap();
            self.velocity = (self.velocity + n.sample(rng)).clamp(-3.0 * turn_rate, 3.0 * turn_rate);
            self.bottom_x = (self.bottom_x + 0.25 * n.sample(rng)).clamp(0.38, 0.62);
        }
        self.far_offset += self.velocity;
        if self.far_offset.abs() > 0.3 {
            self.far_offset = self.far_offset.clamp(-0.3, 0.3);
            self.velocity = -self.velocity;
        }
    }
}

/// Render sequence `index` of the dataset described by `spec`.
pub fn generate_sequence(spec: &SyntheticSpec, index: usize) -> Result<SequenceClip, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);

    let mut road = Road {
        horizon: rng.random_range(0.25..0.4),
        half_bottom: 0.28 * rng.random_range(0.85..1.15),
        half_top: 0.04 * rng.random_range(0.85..1.15),
        bottom_x: 0.5 + rng.random_range(-0.08..0.08),
        far_offset: rng.random_range(-0.15..0.15),
        velocity: 0.0,
    };
    let amp = spec.texture_amplitude / (TEXTURE_WAVES as f64 / 2.0).sqrt();
    let mut waves: Vec<Wave> = (0..TEXTURE_WAVES)
        .map(|_| {
            let cycles: f64 = rng.random_range(1.0..5.0);
            let dir: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let k = 2.0 * std::f64::consts::PI * cycles;
            Wave { kx: k * dir.cos() / wf, ky: k * dir.sin() / hf, amp, phase: rng.random_range(0.0..6.3) }
        })
        .collect();

    let n = spec.frames_per_sequence;
    let occlusion = if rng.random_bool(spec.occlusion_prob) {
        let start = rng.random_range(1..=n - spec.occlusion_len);
        Some(start..start + spec.occlusion_len)
    } else {
        None
    };

    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).unwrap();
    let drift = Normal::new(0.0, spec.texture_drift.max(1e-12)).unwrap();
    let j = spec.jitter_px as i64;
    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            road.step(spec.turn_rate, &mut rng);
            for wave in &mut waves {
                wave.phase += drift.sample(&mut rng);
            }
        }
        let (jx, jy) = (rng.random_range(-j..=j) as f64, rng.random_range(-j..=j) as f64);
        let occluded = occlusion.as_ref().is_some_and(|r| r.contains(&t));
        let contrast = if rng.random_bool(spec.fade_prob) { spec.road_contrast * spec.fade_level } else { spec.road_contrast };
        let mut image = vec![0.0f32; h * w];
        let mut mask = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (ys, xs) = (y as f64 - jy, x as f64 - jx);
                let on_road = !occluded && road.contains(ys, xs, hf, wf);
                let texture: f64 = waves
                    .iter()
                    .map(|wv| wv.amp * (wv.kx * xs + wv.ky * ys + wv.phase).sin())
                    .sum();
                let mut v = BACKGROUND_LEVEL + texture + noise.sample(&mut rng);
                if on_road {
                    v += contrast;
                    mask[y * w + x] = 1.0;
                }
                image[y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
        frames.push(Frame {
            image: Tensor::new(&[1, h, w], image).expect("frame shape"),
            timestamp: t as f64 / spec.frame_rate_hz,
        });
        masks.push(Tensor::new(&[h, w], mask).expect("mask shape"));
    }
    Ok(SequenceClip {
        sequence_id: format!("seq_{index:03}"),
        frames,
        masks,
        is_training_clip: index < split_counts(spec.n_sequences).0,
    })
}
