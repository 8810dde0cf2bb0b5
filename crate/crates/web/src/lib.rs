//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three interactive pieces: a synthetic sequence viewer with mask overlay and
//! target inversion, a memory-bank timeline showing when the semantic token is
//! gated in, and a spatiotemporal positional-code heatmap.

use ironet_core::data::{freespace_fraction, generate_sequence, SequenceClip, SyntheticSpec};
use ironet_core::decoder::{adt_target, AdtTask};
use ironet_core::numerics::Tensor;
use ironet_core::temporal::{spatiotemporal_pe, MemoryBank, MemoryEntry};
use wasm_bindgen::prelude::*;

/// Error surfaced to JavaScript as a string; kept a plain Rust type so the
/// bindings also run natively in tests.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoError(pub String);

impl From<DemoError> for JsValue {
    fn from(e: DemoError) -> Self {
        JsValue::from_str(&e.0)
    }
}

fn js_err(e: impl std::fmt::Display) -> DemoError {
    DemoError(e.to_string())
}

/// One rendered synthetic sequence.
#[wasm_bindgen]
pub struct SyntheticSequence {
    clip: SequenceClip,
}

#[wasm_bindgen]
impl SyntheticSequence {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, index: usize, frames: usize, size: usize, occlusion_prob: f64) -> Result<SyntheticSequence, DemoError> {
        let spec = SyntheticSpec {
            n_sequences: index + 1,
            frames_per_sequence: frames,
            height: size,
            width: size,
            occlusion_prob,
            occlusion_len: 5.min(frames.saturating_sub(1)),
            seed,
            ..Default::default()
        };
        Ok(SyntheticSequence { clip: generate_sequence(&spec, index).map_err(js_err)? })
    }

    pub fn len(&self) -> usize {
        self.clip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip.is_empty()
    }

    pub fn size(&self) -> usize {
        self.clip.frames[0].height()
    }

    pub fn timestamp(&self, t: usize) -> f64 {
        self.clip.frames[t].timestamp
    }

    pub fn coverage(&self, t: usize) -> f64 {
        freespace_fraction(&self.clip.masks[t])
    }

    /// RGBA pixels of frame `t`; `overlay` tints the target green, `invert`
    /// swaps freespace and background.
    pub fn frame_rgba(&self, t: usize, overlay: bool, invert: bool) -> Result<Vec<u8>, DemoError> {
        let frame = &self.clip.frames[t];
        let task = if invert { AdtTask::Background } else { AdtTask::Foreground };
        let target = adt_target(&self.clip.masks[t], task).map_err(js_err)?;
        let px = frame.image.data();
        let mut out = Vec::with_capacity(px.len() * 4);
        for (&v, &m) in px.iter().zip(target.data()) {
            let g = (v.clamp(0.0, 1.0) * 255.0) as u8;
            if overlay && m > 0.5 {
                out.extend_from_slice(&[g / 2, g / 2 + 120, g / 2, 255]);
            } else {
                out.extend_from_slice(&[g, g, g, 255]);
            }
        }
        Ok(out)
    }

    /// Replay the sequence through a FIFO bank of `queue_len` ground-truth entries.
    /// Per frame: the coverage seen before decoding, and 1 if the semantic token is appended.
    pub fn gate_timeline(&self, queue_len: usize, tau: f64) -> Result<Vec<f64>, DemoError> {
        if queue_len == 0 {
            return Err(js_err("queue length must be positive"));
        }
        let mut bank = MemoryBank::new(queue_len);
        let entry = |ts: f64, fraction: f64| MemoryEntry {
            tokens: Tensor::zeros(&[1, 1, 1]),
            timestamp: ts,
            freespace_fraction: fraction,
            source: None,
        };
        bank.push(entry(self.timestamp(0) - 1e-3, 0.0)).map_err(js_err)?;
        let mut out = Vec::with_capacity(2 * self.len());
        for t in 0..self.len() {
            let c = bank.coverage_ratio();
            out.push(c);
            out.push(if c < tau { 1.0 } else { 0.0 });
            bank.push(entry(self.timestamp(t), self.coverage(t))).map_err(js_err)?;
        }
        Ok(out)
    }
}

/// RGBA heatmap of one channel of the `d`-wide spatiotemporal code on an
/// `h x w` grid, for the frame at relative time `t` in `[0, 1]` of the window.
#[wasm_bindgen]
pub fn positional_code_rgba(h: usize, w: usize, d: usize, channel: usize, t: f64) -> Result<Vec<u8>, DemoError> {
    if channel >= d || h == 0 || w == 0 {
        return Err(js_err("channel must be below d and the grid non-empty"));
    }
    let codes = spatiotemporal_pe(h, w, &[0.0, t.clamp(0.0, 1.0), 1.0], d).map_err(js_err)?;
    let code = &codes[1];
    let plane = &code.data()[channel * h * w..(channel + 1) * h * w];
    let mut out = Vec::with_capacity(h * w * 4);
    for &v in plane {
        let u = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
        out.extend_from_slice(&[(255.0 * u) as u8, (80.0 + 60.0 * (1.0 - u)) as u8, (255.0 * (1.0 - u)) as u8, 255]);
    }
    Ok(out)
}

/// `[time, y, x]` channel counts of a `d`-wide code.
#[wasm_bindgen]
pub fn positional_split(d: usize) -> Vec<usize> {
    let (t, y, x) = ironet_core::temporal::pe_split(d);
    vec![t, y, x]
}
