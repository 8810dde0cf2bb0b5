//! Mask-aware memory: a FIFO bank of past token grids, 3D sinusoidal position
//! codes, the self/cross memory-attention stack, and the teacher-forcing curriculum.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::freespace_fraction;
use crate::layers::{map_to_tokens, tokens_to_map, Attention, LayerNorm, Mlp, Pointwise, Store, G};
use crate::numerics::{init, kernels, NumericsError, ParamId, Tensor, Var};

#[derive(Debug, Error)]
pub enum TemporalError {
    #[error("memory timestamp {got} is not after the newest stored timestamp {newest}")]
    NonMonotonic { newest: f64, got: f64 },
    #[error("mask {mask_h}x{mask_w} cannot be pooled onto a {grid_h}x{grid_w} memory grid")]
    Resolution { mask_h: usize, mask_w: usize, grid_h: usize, grid_w: usize },
    #[error("mask is not binary")]
    NonBinaryMask,
    #[error("positional embedding needs at least one timestamp")]
    NoTimestamps,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, TemporalError>;

/// Inputs a memory entry was encoded from; kept so training can re-encode inside a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySource {
    pub features: Tensor<f32>,
    pub pooled_mask: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    /// `[c0, h0, w0]` mask-aware token grid.
    pub tokens: Tensor<f32>,
    pub timestamp: f64,
    pub freespace_fraction: f64,
    pub source: Option<MemorySource>,
}

/// Bounded FIFO of memory entries, oldest first.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory bank capacity must be positive");
        MemoryBank { capacity, entries: VecDeque::with_capacity(capacity + 1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.timestamp).collect()
    }

    /// Append, evicting the oldest entry when over capacity.
    pub fn push(&mut self, entry: MemoryEntry) -> Result<()> {
        if let Some(newest) = self.entries.back() {
            if !(entry.timestamp > newest.timestamp) {
                return Err(TemporalError::NonMonotonic { newest: newest.timestamp, got: entry.timestamp });
            }
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }

    /// Mean stored freespace fraction; 0 for an empty bank.
    pub fn coverage_ratio(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.freespace_fraction).sum::<f64>() / self.entries.len() as f64
    }
}

/// Area-average a binary `[H, W]` mask onto an `h x w` grid.
pub fn pool_mask(mask: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (mh, mw) = (mask.dim(0), mask.dim(1));
    if mask.rank() != 2 || mh < h || mw < w || h == 0 || w == 0 {
        return Err(TemporalError::Resolution { mask_h: mask.dim(0), mask_w: mask.dim(1), grid_h: h, grid_w: w });
    }
    let pooled = kernels::pool_forward(mask.data(), 1, mh, mw, h, w);
    Ok(Tensor::new(&[1, h, w], pooled)?)
}

/// Depthwise-separable encoder from `[F0; pooled mask]` to memory tokens.
#[derive(Debug, Clone)]
pub struct MemoryEncoder {
    pub channels: usize,
    dw: ParamId,
    pw: Pointwise,
}

impl MemoryEncoder {
    pub fn new(store: &mut Store, channels: usize, rng: &mut impl Rng) -> std::result::Result<Self, NumericsError> {
        let c = channels + 1;
        let dw = store.register("memory.encoder.dw", init::normal(&[c, 3, 3], 1.0 / 3.0, rng))?;
        let pw = Pointwise::new(store, "memory.encoder.pw", c, channels, rng)?;
        // Give the single mask channel as much initial weight as all feature channels together.
        let gain = (channels as f32).sqrt();
        for row in store.value_mut(pw.w).data_mut().chunks_mut(c) {
            row[channels] *= gain;
        }
        Ok(MemoryEncoder { channels, dw, pw })
    }

    pub fn param_count(channels: usize) -> usize {
        (channels + 1) * 9 + Pointwise::count(channels + 1, channels)
    }

    /// `features: [c0, h0, w0]`, `pooled_mask: [1, h0, w0]`.
    pub fn encode(&self, g: &mut G, ps: &Store, features: Var, pooled_mask: Var) -> Result<Var> {
        let x = g.concat(&[features, pooled_mask])?;
        let dw = g.param(ps, self.dw);
        let x = g.depthwise_conv2d(x, dw)?;
        Ok(self.pw.forward(g, ps, x)?)
    }

    /// Encode a stored entry from deepest features and a full-resolution binary mask.
    pub fn encode_entry(&self, ps: &Store, features: &Tensor<f32>, mask: &Tensor<f32>, timestamp: f64) -> Result<MemoryEntry> {
        if features.rank() != 3 || features.dim(0) != self.channels {
            return Err(TemporalError::Numerics(NumericsError::Shape(format!(
                "memory features must be [{}, h, w], got {:?}",
                self.channels,
                features.shape()
            ))));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(TemporalError::NonBinaryMask);
        }
        let pooled_mask = pool_mask(mask, features.dim(1), features.dim(2))?;
        let mut g = G::new();
        let f = g.constant(features.clone());
        let m = g.constant(pooled_mask.clone());
        let tokens = self.encode(&mut g, ps, f, m)?;
        Ok(MemoryEntry {
            tokens: g.take_value(tokens),
            timestamp,
            freespace_fraction: freespace_fraction(mask),
            source: Some(MemorySource { features: features.clone(), pooled_mask }),
        })
    }
}

const MIN_FREQ: f64 = std::f64::consts::PI;
const FREQ_SPAN: f64 = 32.0;

/// Sinusoidal code of a position in `[0, 1]` spread over `n` channels
/// (sin/cos pairs on a geometric frequency ladder from pi to 32 pi).
pub(crate) fn axis_code(n: usize, pos: f64, out: &mut [f32]) {
    let pairs = n.div_ceil(2);
    for (j, o) in out.iter_mut().enumerate().take(n) {
        let f = j / 2;
        let ratio = if pairs > 1 { f as f64 / (pairs - 1) as f64 } else { 0.0 };
        let w = MIN_FREQ * FREQ_SPAN.powf(ratio);
        *o = if j % 2 == 0 { (w * pos).sin() } else { (w * pos).cos() } as f32;
    }
}

/// Channel split of a `d`-wide 3D code: `(time, y, x)`.
pub fn pe_split(d: usize) -> (usize, usize, usize) {
    let t = d.div_ceil(3);
    let rest = d - t;
    (t, rest / 2, rest - rest / 2)
}

/// 2D sinusoidal code `[d, h, w]` (y and x halves).
pub fn spatial_pe(h: usize, w: usize, d: usize) -> Tensor<f32> {
    Tensor::new(&[d, h, w], spatial_pe_split(h, w, d / 2, d - d / 2)).expect("pe shape")
}

/// One `[d, h0, w0]` code per timestamp. The first timestamp (oldest) maps to
/// time 0 and the last (current frame) to 1.
pub fn spatiotemporal_pe(h0: usize, w0: usize, timestamps: &[f64], d: usize) -> Result<Vec<Tensor<f32>>> {
    let (Some(&first), Some(&last)) = (timestamps.first(), timestamps.last()) else {
        return Err(TemporalError::NoTimestamps);
    };
    let span = last - first;
    let (dt, dy, dx) = pe_split(d);
    let spatial = spatial_pe_split(h0, w0, dy, dx);
    let mut tbuf = vec![0.0f32; dt];
    Ok(timestamps
        .iter()
        .map(|&t| {
            let tn = if span > 0.0 { (t - first) / span } else { 1.0 };
            axis_code(dt, tn, &mut tbuf);
            let mut out = vec![0.0f32; d * h0 * w0];
            let n = h0 * w0;
            for (c, &v) in tbuf.iter().enumerate() {
                out[c * n..(c + 1) * n].fill(v);
            }
            out[dt * n..].copy_from_slice(&spatial);
            Tensor::new(&[d, h0, w0], out).expect("pe shape")
        })
        .collect())
}

fn spatial_pe_split(h: usize, w: usize, dy: usize, dx: usize) -> Vec<f32> {
    let d = dy + dx;
    let mut out = vec![0.0f32; d * h * w];
    let mut buf = vec![0.0f32; d];
    for y in 0..h {
        for x in 0..w {
            axis_code(dy, (y as f64 + 0.5) / h as f64, &mut buf[..dy]);
            axis_code(dx, (x as f64 + 0.5) / w as f64, &mut buf[dy..]);
            for (c, &v) in buf.iter().enumerate() {
                out[(c * h + y) * w + x] = v;
            }
        }
    }
    out
}

/// `[c, h, w]` code to `[h*w, c]` rows.
fn pe_rows(pe: &Tensor<f32>) -> Vec<f32> {
    let (c, n) = (pe.dim(0), pe.dim(1) * pe.dim(2));
    kernels::transpose(pe.data(), c, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalConfig {
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig { blocks: 2, heads: 4, mlp_ratio: 2 }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MemoryBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_query: LayerNorm,
    pub ln_memory: LayerNorm,
    pub cross_attn: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

/// A memory grid as seen by the attention stack.
#[derive(Debug, Clone, Copy)]
pub struct MemoryRef {
    /// `[c0, h0, w0]`.
    pub tokens: Var,
    pub timestamp: f64,
}

/// Stacked self-attention / memory cross-attention / MLP blocks.
#[derive(Debug, Clone)]
pub struct MemoryAttention {
    pub config: TemporalConfig,
    pub channels: usize,
    pub(crate) blocks: Vec<MemoryBlock>,
}

impl MemoryAttention {
    pub fn new(store: &mut Store, config: TemporalConfig, channels: usize, rng: &mut impl Rng) -> std::result::Result<Self, NumericsError> {
        if config.heads == 0 || channels % config.heads != 0 {
            return Err(NumericsError::Shape(format!("{channels} channels not divisible by {} heads", config.heads)));
        }
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let p = format!("memory.block{i}");
            blocks.push(MemoryBlock {
                ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), channels)?,
                self_attn: Attention::new(store, &format!("{p}.self_attn"), channels, config.heads, rng)?,
                ln_query: LayerNorm::new(store, &format!("{p}.ln_query"), channels)?,
                ln_memory: LayerNorm::new(store, &format!("{p}.ln_memory"), channels)?,
                cross_attn: Attention::new(store, &format!("{p}.cross_attn"), channels, config.heads, rng)?,
                ln_mlp: LayerNorm::new(store, &format!("{p}.ln_mlp"), channels)?,
                mlp: Mlp::new(store, &format!("{p}.mlp"), channels, channels * config.mlp_ratio, rng)?,
            });
        }
        Ok(MemoryAttention { config, channels, blocks })
    }

    pub fn param_count(config: &TemporalConfig, channels: usize) -> usize {
        let c = channels;
        config.blocks * (4 * LayerNorm::count(c) + 2 * Attention::count(c) + Mlp::count(c, c * config.mlp_ratio))
    }

    /// Enrich `features: [c0, h0, w0]` with the given memory. An empty memory skips
    /// every cross-attention sublayer.
    pub fn enrich(&self, g: &mut G, ps: &Store, features: Var, memory: &[MemoryRef], current_timestamp: f64) -> Result<Var> {
        let s = g.shape(features).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut x = map_to_tokens(g, features)?;
        let cross = if memory.is_empty() {
            None
        } else {
            let mut stamps: Vec<f64> = memory.iter().map(|m| m.timestamp).collect();
            stamps.push(current_timestamp);
            let pes = spatiotemporal_pe(h, w, &stamps, c)?;
            let n = h * w;
            let q_pe = g.constant(Tensor::new(&[n, c], pe_rows(&pes[memory.len()]))?);
            let mut mem_pe = Vec::with_capacity(memory.len() * n * c);
            let mut parts = Vec::with_capacity(memory.len());
            for (m, pe) in memory.iter().zip(&pes) {
                mem_pe.extend(pe_rows(pe));
                parts.push(map_to_tokens(g, m.tokens)?);
            }
            let mem = g.concat(&parts)?;
            let mem_pe = g.constant(Tensor::new(&[memory.len() * n, c], mem_pe)?);
            Some((mem, mem_pe, q_pe))
        };
        for b in &self.blocks {
            let y = b.ln_self.forward(g, ps, x)?;
            let y = b.self_attn.forward(g, ps, y, y, y)?;
            x = g.add(x, y)?;
            if let Some((mem, mem_pe, q_pe)) = cross {
                let q = b.ln_query.forward(g, ps, x)?;
                let q = g.add(q, q_pe)?;
                let v = b.ln_memory.forward(g, ps, mem)?;
                let k = g.add(v, mem_pe)?;
                let y = b.cross_attn.forward(g, ps, q, k, v)?;
                x = g.add(x, y)?;
            }
            let y = b.ln_mlp.forward(g, ps, x)?;
            let y = b.mlp.forward(g, ps, y)?;
            x = g.add(x, y)?;
        }
        Ok(tokens_to_map(g, x, h, w)?)
    }
}

/// Enrich `features` against a bank of stored (detached) entries.
pub fn temporal_enrich(
    attention: &MemoryAttention,
    ps: &Store,
    features: &Tensor<f32>,
    bank: &MemoryBank,
    current_timestamp: f64,
) -> Result<Tensor<f32>> {
    let mut g = G::new();
    let f = g.constant(features.clone());
    let memory: Vec<MemoryRef> = bank
        .entries()
        .map(|e| MemoryRef { tokens: g.constant(e.tokens.clone()), timestamp: e.timestamp })
        .collect();
    let out = attention.enrich(&mut g, ps, f, &memory, current_timestamp)?;
    Ok(g.take_value(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSource {
    GroundTruth,
    Predicted,
}

/// Fraction of training completed and the resulting probability of storing predicted masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumState {
    pub progress: f64,
    pub p_predicted: f64,
}

impl CurriculumState {
    pub fn at(progress: f64) -> Self {
        let progress = progress.clamp(0.0, 1.0);
        CurriculumState { progress, p_predicted: (2.0 * progress).clamp(0.0, 1.0) }
    }
}

pub fn curriculum_source(state: &CurriculumState, rng: &mut impl Rng) -> MaskSource {
    if rng.random_bool(state.p_predicted.clamp(0.0, 1.0)) {
        MaskSource::Predicted
    } else {
        MaskSource::GroundTruth
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::zero_param;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(ts: f64, frac: f64) -> MemoryEntry {
        MemoryEntry { tokens: Tensor::zeros(&[4, 2, 2]), timestamp: ts, freespace_fraction: frac, source: None }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn small_encoder(c: usize) -> (MemoryEncoder, Store) {
        let mut ps = Store::new();
        let enc = MemoryEncoder::new(&mut ps, c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (enc, ps)
    }

    #[test]
    fn freespace_fraction_of_encoded_entries() {
        let (enc, ps) = small_encoder(4);
        let f = rand_tensor(&[4, 4, 4], 0);
        let zero = enc.encode_entry(&ps, &f, &Tensor::zeros(&[32, 32]), 0.0).unwrap();
        let one = enc.encode_entry(&ps, &f, &Tensor::full(&[32, 32], 1.0), 0.0).unwrap();
        assert_eq!((zero.freespace_fraction, one.freespace_fraction), (0.0, 1.0));
        assert_eq!(zero.tokens.shape(), &[4, 4, 4]);
        assert_eq!(ps.numel(), MemoryEncoder::param_count(4));
    }

    #[test]
    fn boundary_fraction_is_exact() {
        let (enc, ps) = small_encoder(2);
        let mut mask = Tensor::zeros(&[512, 640]);
        mask.data_mut()[..16_384].fill(1.0);
        let f = rand_tensor(&[2, 64, 80], 1);
        let e = enc.encode_entry(&ps, &f, &mask, 0.0).unwrap();
        assert_eq!(e.freespace_fraction, 0.05);
    }

    #[test]
    fn bad_masks_are_rejected() {
        let (enc, ps) = small_encoder(2);
        let f = rand_tensor(&[2, 8, 8], 1);
        assert!(matches!(enc.encode_entry(&ps, &f, &Tensor::full(&[16, 16], 0.5), 0.0), Err(TemporalError::NonBinaryMask)));
        assert!(matches!(enc.encode_entry(&ps, &f, &Tensor::zeros(&[4, 16]), 0.0), Err(TemporalError::Resolution { .. })));
    }

    #[test]
    fn fifo_keeps_newest() {
        let mut bank = MemoryBank::new(5);
        bank.push(entry(0.0, 0.0)).unwrap();
        assert_eq!(bank.len(), 1);
        for t in 1..6 {
            bank.push(entry(t as f64, 0.0)).unwrap();
        }
        assert_eq!(bank.timestamps(), [1.0, 2.0, 3.0, 4.0, 5.0]);

        let mut bank = MemoryBank::new(3);
        for t in 0..4 {
            bank.push(entry(t as f64, 0.0)).unwrap();
        }
        assert_eq!(bank.timestamps(), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn stale_timestamps_are_rejected() {
        let mut bank = MemoryBank::new(3);
        bank.push(entry(1.0, 0.0)).unwrap();
        assert!(matches!(bank.push(entry(1.0, 0.0)), Err(TemporalError::NonMonotonic { .. })));
        assert!(bank.push(entry(0.5, 0.0)).is_err());
        assert_eq!(bank.len(), 1);
    }

    #[test]
    fn reset_empties_and_is_idempotent() {
        let mut bank = MemoryBank::new(3);
        for t in 0..7 {
            bank.push(entry(t as f64, 0.3)).unwrap();
        }
        bank.reset();
        assert_eq!(bank.len(), 0);
        bank.reset();
        assert!(bank.is_empty());
        bank.push(entry(0.0, 0.0)).unwrap();
    }

    #[test]
    fn coverage_is_the_mean_fraction() {
        let mut bank = MemoryBank::new(3);
        assert_eq!(bank.coverage_ratio(), 0.0);
        bank.push(entry(0.0, 0.2)).unwrap();
        bank.push(entry(1.0, 0.3)).unwrap();
        assert!((bank.coverage_ratio() - 0.25).abs() < 1e-15);
        let mut full = MemoryBank::new(2);
        full.push(entry(0.0, 1.0)).unwrap();
        full.push(entry(1.0, 1.0)).unwrap();
        assert_eq!(full.coverage_ratio(), 1.0);
    }

    proptest! {
        #[test]
        fn bank_invariants(cap in 1usize..6, fracs in proptest::collection::vec(0.0f64..=1.0, 0..20)) {
            let mut bank = MemoryBank::new(cap);
            for (i, &f) in fracs.iter().enumerate() {
                bank.push(entry(i as f64 * 0.4, f)).unwrap();
            }
            let ts = bank.timestamps();
            prop_assert!(ts.windows(2).all(|p| p[1] > p[0]));
            prop_assert_eq!(bank.len(), fracs.len().min(cap));
            let kept = &fracs[fracs.len() - bank.len()..];
            let stored: Vec<f64> = bank.entries().map(|e| e.freespace_fraction).collect();
            prop_assert_eq!(&stored[..], kept);
            if !kept.is_empty() {
                let lo = kept.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = kept.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let c = bank.coverage_ratio();
                prop_assert!(c >= lo - 1e-12 && c <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn pe_shapes_and_channel_partition() {
        let pes = spatiotemporal_pe(4, 4, &[0.0, 0.4, 0.8], 48).unwrap();
        assert_eq!(pes.len(), 3);
        assert!(pes.iter().all(|p| p.shape() == [48, 4, 4]));
        let (dt, _, _) = pe_split(48);
        assert_eq!(dt, 16);
        for c in 0..48 {
            let (a, b) = (pes[0].at3(c, 2, 1), pes[2].at3(c, 2, 1));
            if c >= dt {
                assert_eq!(a, b, "spatial channel {c} changed with time");
            }
        }
        assert_ne!(&pes[0].data()[..16 * 16], &pes[2].data()[..16 * 16]);
        assert!(spatiotemporal_pe(4, 4, &[], 48).is_err());
    }

    #[test]
    fn equal_coordinates_equal_codes() {
        let pes = spatiotemporal_pe(3, 5, &[1.0, 2.0, 2.0], 30).unwrap();
        for c in 0..30 {
            assert_eq!(pes[1].at3(c, 1, 4), pes[2].at3(c, 1, 4));
        }
        let sp = spatial_pe(6, 6, 16);
        let col = |y: usize, x: usize| (0..16).map(|c| sp.at3(c, y, x)).collect::<Vec<_>>();
        assert_ne!(col(1, 2), col(2, 1));
    }

    #[test]
    fn time_normalises_oldest_to_zero_and_current_to_one() {
        let pes = spatiotemporal_pe(1, 1, &[3.0, 5.0], 9).unwrap();
        let mut code = vec![0.0f32; 3];
        axis_code(3, 0.0, &mut code);
        assert_eq!(&pes[0].data()[..3], &code[..]);
        axis_code(3, 1.0, &mut code);
        assert_eq!(&pes[1].data()[..3], &code[..]);
    }

    fn attention_module(c: usize) -> (MemoryAttention, Store) {
        let mut ps = Store::new();
        let m = MemoryAttention::new(&mut ps, TemporalConfig::default(), c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(ps.numel(), MemoryAttention::param_count(&TemporalConfig::default(), c));
        (m, ps)
    }

    fn bank_of(n: usize, c: usize, seed: u64) -> MemoryBank {
        let mut bank = MemoryBank::new(3);
        for i in 0..n {
            let mut e = entry(i as f64 * 0.4, 0.5);
            e.tokens = rand_tensor(&[c, 4, 4], seed + i as u64);
            bank.push(e).unwrap();
        }
        bank
    }

    #[test]
    fn empty_bank_ignores_cross_attention_parameters() {
        let (m, ps) = attention_module(16);
        let f = rand_tensor(&[16, 4, 4], 1);
        let a = temporal_enrich(&m, &ps, &f, &MemoryBank::new(3), 2.0).unwrap();
        let mut scrambled = ps.clone();
        for b in &m.blocks {
            for id in [b.cross_attn.q.w, b.cross_attn.o.w, b.ln_query.gamma, b.ln_memory.beta] {
                scrambled.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 3.0);
            }
        }
        let b = temporal_enrich(&m, &scrambled, &f, &MemoryBank::new(3), 2.0).unwrap();
        assert_eq!(a, b);
        let with_memory = temporal_enrich(&m, &ps, &f, &bank_of(2, 16, 5), 2.0).unwrap();
        assert_ne!(a, with_memory);
    }

    #[test]
    fn output_shape_matches_input_for_any_bank_size() {
        let (m, ps) = attention_module(16);
        let f = rand_tensor(&[16, 4, 4], 1);
        for n in 0..=3 {
            let out = temporal_enrich(&m, &ps, &f, &bank_of(n, 16, 9), 5.0).unwrap();
            assert_eq!(out.shape(), f.shape());
            assert!(out.all_finite());
        }
    }

    #[test]
    fn zero_value_path_makes_output_bank_independent() {
        let (m, mut ps) = attention_module(16);
        for b in &m.blocks {
            zero_param(&mut ps, b.cross_attn.v.w);
            zero_param(&mut ps, b.cross_attn.v.b);
        }
        let f = rand_tensor(&[16, 4, 4], 1);
        let a = temporal_enrich(&m, &ps, &f, &bank_of(3, 16, 10), 5.0).unwrap();
        let b = temporal_enrich(&m, &ps, &f, &bank_of(3, 16, 20), 5.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn enrichment_is_deterministic() {
        let (m, ps) = attention_module(16);
        let f = rand_tensor(&[16, 4, 4], 1);
        let bank = bank_of(3, 16, 3);
        assert_eq!(temporal_enrich(&m, &ps, &f, &bank, 5.0).unwrap(), temporal_enrich(&m, &ps, &f, &bank, 5.0).unwrap());
    }

    #[test]
    fn gradients_reach_the_memory_encoder() {
        let mut ps = Store::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = MemoryEncoder::new(&mut ps, 16, &mut rng).unwrap();
        let att = MemoryAttention::new(&mut ps, TemporalConfig::default(), 16, &mut rng).unwrap();
        let mut g = G::new();
        let feats = g.constant(rand_tensor(&[16, 4, 4], 2));
        let mask = g.constant(pool_mask(&Tensor::full(&[16, 16], 1.0), 4, 4).unwrap());
        let tokens = enc.encode(&mut g, &ps, feats, mask).unwrap();
        let cur = g.constant(rand_tensor(&[16, 4, 4], 3));
        let out = att.enrich(&mut g, &ps, cur, &[MemoryRef { tokens, timestamp: 0.0 }], 1.0).unwrap();
        let r = g.constant(rand_tensor(&[16, 4, 4], 4));
        let prod = g.mul(out, r).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, &mut ps);
        let enc_norm: f64 = [enc.dw, enc.pw.w]
            .iter()
            .map(|&id| ps.grad(id).data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>())
            .sum();
        assert!(enc_norm > 0.0);
    }

    #[test]
    fn curriculum_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s0 = CurriculumState::at(0.0);
        assert!((0..1000).all(|_| curriculum_source(&s0, &mut rng) == MaskSource::GroundTruth));
        for p in [0.5, 0.7, 1.0] {
            let s = CurriculumState::at(p);
            assert_eq!(s.p_predicted, 1.0);
            assert!((0..1000).all(|_| curriculum_source(&s, &mut rng) == MaskSource::Predicted));
        }
        let s = CurriculumState::at(0.25);
        let hits = (0..10_000).filter(|_| curriculum_source(&s, &mut rng) == MaskSource::Predicted).count();
        assert!((hits as f64 / 10_000.0 - 0.5).abs() <= 0.02, "{hits}");
    }
}
