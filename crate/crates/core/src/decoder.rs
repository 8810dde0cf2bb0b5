//! Prompt-free mask decoder: dual-task targets, coverage-gated semantic tokens,
//! a two-way token/image transformer, hierarchical upsampling with pyramid skips,
//! and the inner-product mask head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::FeaturePyramid;
use crate::layers::{map_to_tokens, tokens_to_map, Attention, LayerNorm, Linear, Mlp, Pointwise, Store, Upsample, G};
use crate::numerics::{init, Graph, NumericsError, ParamId, Scalar, Tensor, Var, LOG_FLOOR};
use crate::temporal::spatial_pe;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("mask is not binary")]
    NonBinaryMask,
    #[error("class frequency {0} outside [0, 1]")]
    InvalidFrequency(f64),
    #[error("decoder needs at least one token")]
    EmptyTokens,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, DecoderError>;

/// Supervision target of a training clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdtTask {
    Foreground,
    Background,
}

fn check_binary(y: &Tensor<f32>) -> Result<()> {
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(DecoderError::NonBinaryMask);
    }
    Ok(())
}

/// `y` for the foreground task, `1 - y` for the background task.
pub fn adt_target(y: &Tensor<f32>, task: AdtTask) -> Result<Tensor<f32>> {
    check_binary(y)?;
    Ok(match task {
        AdtTask::Foreground => y.clone(),
        AdtTask::Background => y.map(|v| 1.0 - v),
    })
}

/// Foreground with probability equal to the freespace pixel frequency.
pub fn sample_task(freespace_pixel_frequency: f64, rng: &mut impl Rng) -> Result<AdtTask> {
    if !(0.0..=1.0).contains(&freespace_pixel_frequency) {
        return Err(DecoderError::InvalidFrequency(freespace_pixel_frequency));
    }
    Ok(if rng.random_bool(freespace_pixel_frequency) { AdtTask::Foreground } else { AdtTask::Background })
}

/// The three trainable `[1, d]` decoder tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSet {
    pub mask: ParamId,
    pub freespace: ParamId,
    pub background: ParamId,
}

impl TokenSet {
    pub fn semantic(&self, task: AdtTask) -> ParamId {
        match task {
            AdtTask::Foreground => self.freespace,
            AdtTask::Background => self.background,
        }
    }
}

/// Decoder token sequence: the mask token, followed by the task's semantic token
/// when memory coverage is strictly below `tau`.
pub fn sgmc_tokens(coverage: f64, tau: f64, task: AdtTask, tokens: &TokenSet) -> Vec<ParamId> {
    if coverage < tau {
        vec![tokens.mask, tokens.semantic(task)]
    } else {
        vec![tokens.mask]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { depth: 2, heads: 4, mlp_ratio: 2 }
    }
}

#[derive(Debug, Clone)]
struct TwoWayLayer {
    self_attn: Attention,
    ln1: LayerNorm,
    token_to_image: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
    ln3: LayerNorm,
    image_to_token: Attention,
    ln4: LayerNorm,
}

#[derive(Debug, Clone)]
struct UpStage {
    up: Upsample,
    skip: Pointwise,
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub config: DecoderConfig,
    pub tokens: TokenSet,
    width: usize,
    layers: Vec<TwoWayLayer>,
    stages: Vec<UpStage>,
    query: [Linear; 3],
}

/// Per-pixel inner product of `query: [1, c]` with `features: [c, h, w]`, giving `[1, h, w]` logits.
/// Shrinks the last query layer at init so the first logits sit near zero.
const QUERY_OUT_INIT_SCALE: f32 = 0.1;

pub fn mask_logits<T: Scalar>(g: &mut Graph<T>, query: Var, features: Var) -> std::result::Result<Var, NumericsError> {
    let s = g.shape(features).to_vec();
    let flat = g.reshape(features, &[s[0], s[1] * s[2]])?;
    let l = g.matmul(query, flat)?;
    g.reshape(l, &[1, s[1], s[2]])
}

impl MaskDecoder {
    /// `channels[i]` is the width of pyramid level `i`; the decoder runs at `channels[0]`.
    pub fn new(store: &mut Store, config: DecoderConfig, channels: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let d = channels[0];
        if config.heads == 0 || d % config.heads != 0 {
            return Err(DecoderError::Shape(format!("width {d} not divisible by {} heads", config.heads)));
        }
        let tokens = TokenSet {
            mask: store.register("decoder.token.mask", init::normal(&[1, d], 1.0, rng))?,
            freespace: store.register("decoder.token.freespace", init::normal(&[1, d], 1.0, rng))?,
            background: store.register("decoder.token.background", init::normal(&[1, d], 1.0, rng))?,
        };
        let mut layers = Vec::new();
        for i in 0..config.depth {
            let p = format!("decoder.layer{i}");
            layers.push(TwoWayLayer {
                self_attn: Attention::new(store, &format!("{p}.self_attn"), d, config.heads, rng)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                token_to_image: Attention::new(store, &format!("{p}.token_to_image"), d, config.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                mlp: Mlp::new(store, &format!("{p}.mlp"), d, d * config.mlp_ratio, rng)?,
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), d)?,
                image_to_token: Attention::new(store, &format!("{p}.image_to_token"), d, config.heads, rng)?,
                ln4: LayerNorm::new(store, &format!("{p}.ln4"), d)?,
            });
        }
        let mut stages = Vec::new();
        for i in 1..channels.len() {
            stages.push(UpStage {
                up: Upsample::new(store, &format!("decoder.up{i}"), channels[i - 1], channels[i], 2, rng)?,
                skip: Pointwise::new(store, &format!("decoder.skip{i}"), channels[i], channels[i], rng)?,
            });
        }
        let last = *channels.last().unwrap();
        let query = [
            Linear::new(store, "decoder.query0", d, d, rng)?,
            Linear::new(store, "decoder.query1", d, d, rng)?,
            Linear::new(store, "decoder.query2", d, last, rng)?,
        ];
        store.value_mut(query[2].w).data_mut().iter_mut().for_each(|v| *v *= QUERY_OUT_INIT_SCALE);
        Ok(MaskDecoder { config, tokens, width: d, layers, stages, query })
    }

    pub fn param_count(config: &DecoderConfig, channels: &[usize]) -> usize {
        let d = channels[0];
        let layer = 3 * Attention::count(d) + 4 * LayerNorm::count(d) + Mlp::count(d, d * config.mlp_ratio);
        let mut n = 3 * d + config.depth * layer;
        for i in 1..channels.len() {
            n += Upsample::count(channels[i - 1], channels[i], 2) + Pointwise::count(channels[i], channels[i]);
        }
        n + 2 * Linear::count(d, d) + Linear::count(d, *channels.last().unwrap())
    }

    /// The enhanced mask query `[1, c_last]` and fused high-resolution features.
    pub fn query_and_features(
        &self,
        g: &mut G,
        ps: &Store,
        enriched: Var,
        token_ids: &[ParamId],
        pyramid: &FeaturePyramid,
    ) -> Result<(Var, Var)> {
        if token_ids.is_empty() {
            return Err(DecoderError::EmptyTokens);
        }
        let s = g.shape(enriched).to_vec();
        if s.len() != 3 || s[0] != self.width {
            return Err(DecoderError::Shape(format!("enriched features {s:?} vs decoder width {}", self.width)));
        }
        if pyramid.levels.len() != self.stages.len() + 1 {
            return Err(DecoderError::Shape(format!(
                "{} pyramid levels for {} upsampling stages",
                pyramid.levels.len(),
                self.stages.len()
            )));
        }
        let (h0, w0) = (s[1], s[2]);
        let parts: Vec<Var> = token_ids.iter().map(|&id| g.param(ps, id)).collect();
        let token_pe = g.concat(&parts)?;
        let mut t = token_pe;
        let mut img = map_to_tokens(g, enriched)?;
        let pe = spatial_pe(h0, w0, self.width);
        let image_pe = g.constant(Tensor::new(&[h0 * w0, self.width], crate::numerics::kernels::transpose(pe.data(), self.width, h0 * w0))?);
        for l in &self.layers {
            let q = g.add(t, token_pe)?;
            let y = l.self_attn.forward(g, ps, q, q, t)?;
            let y = g.add(t, y)?;
            t = l.ln1.forward(g, ps, y)?;

            let q = g.add(t, token_pe)?;
            let k = g.add(img, image_pe)?;
            let y = l.token_to_image.forward(g, ps, q, k, img)?;
            let y = g.add(t, y)?;
            t = l.ln2.forward(g, ps, y)?;

            let y = l.mlp.forward(g, ps, t)?;
            let y = g.add(t, y)?;
            t = l.ln3.forward(g, ps, y)?;

            let q = g.add(img, image_pe)?;
            let k = g.add(t, token_pe)?;
            let y = l.image_to_token.forward(g, ps, q, k, t)?;
            let y = g.add(img, y)?;
            img = l.ln4.forward(g, ps, y)?;
        }
        let mut feat = tokens_to_map(g, img, h0, w0)?;
        for (k, stage) in self.stages.iter().enumerate() {
            let up = stage.up.forward(g, ps, feat)?;
            let skip = stage.skip.forward(g, ps, pyramid.levels[k + 1])?;
            if g.shape(up) != g.shape(skip) {
                return Err(DecoderError::Shape(format!(
                    "upsampled {:?} vs pyramid level {:?}",
                    g.shape(up),
                    g.shape(skip)
                )));
            }
            let sum = g.add(up, skip)?;
            feat = g.relu(sum)?;
        }
        let mut q = g.slice_rows(t, 0, 1)?;
        for (i, lin) in self.query.iter().enumerate() {
            q = lin.forward(g, ps, q)?;
            if i < 2 {
                q = g.relu(q)?;
            }
        }
        Ok((q, feat))
    }

    /// Mask logits resized to `out_h x out_w`, as a `[out_h, out_w]` node.
    pub fn decode_logits(
        &self,
        g: &mut G,
        ps: &Store,
        enriched: Var,
        token_ids: &[ParamId],
        pyramid: &FeaturePyramid,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let (q, feat) = self.query_and_features(g, ps, enriched, token_ids, pyramid)?;
        let logits = mask_logits(g, q, feat)?;
        let logits = if g.shape(logits)[1..] != [out_h, out_w] {
            g.resize_bilinear(logits, out_h, out_w)?
        } else {
            logits
        };
        Ok(g.reshape(logits, &[out_h, out_w])?)
    }
}

/// Decode probabilities `[H, W]` from detached inputs.
pub fn himg_decode(
    decoder: &MaskDecoder,
    ps: &Store,
    enriched: &Tensor<f32>,
    token_ids: &[ParamId],
    pyramid: &[Tensor<f32>],
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<f32>> {
    let mut g = G::new();
    let e = g.constant(enriched.clone());
    let pyr = FeaturePyramid { levels: pyramid.iter().map(|t| g.constant(t.clone())).collect() };
    let logits = decoder.decode_logits(&mut g, ps, e, token_ids, &pyr, out_h, out_w)?;
    let p = g.sigmoid(logits)?;
    Ok(g.take_value(p))
}

/// Mean pixel binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if p.shape() != y.shape() {
        return Err(DecoderError::Shape(format!("prediction {:?} vs target {:?}", p.shape(), y.shape())));
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pi, &yi)| {
            let pc = pi.as_f64().clamp(LOG_FLOOR, 1.0 - LOG_FLOOR);
            let yi = yi.as_f64();
            -(yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln())
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// Graph form of [`bce_loss`] on a probability node.
pub fn bce_loss_node<T: Scalar>(g: &mut Graph<T>, p: Var, y: &Tensor<T>) -> Result<Var> {
    if g.shape(p) != y.shape() {
        return Err(DecoderError::Shape(format!("prediction {:?} vs target {:?}", g.shape(p), y.shape())));
    }
    let pc = g.clamp(p, LOG_FLOOR, 1.0 - LOG_FLOOR)?;
    let ln_p = g.ln(pc)?;
    let q = g.affine(pc, -1.0, 1.0)?;
    let ln_q = g.ln(q)?;
    let yv = g.constant(y.clone());
    let ny = g.constant(y.map(|v| T::one() - v));
    let a = g.mul(yv, ln_p)?;
    let b = g.mul(ny, ln_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    Ok(g.scale(m, -1.0)?)
}

/// One decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub probabilities: Tensor<f32>,
    pub binary_mask: Tensor<f32>,
    pub latency_ms: f64,
    /// Whether a semantic token was appended for this frame.
    pub sgmc_active: bool,
}

impl PredictionRecord {
    pub fn new(probabilities: Tensor<f32>, latency_ms: f64, sgmc_active: bool) -> Self {
        let binary_mask = probabilities.map(|p| if p > 0.5 { 1.0 } else { 0.0 });
        PredictionRecord { probabilities, binary_mask, latency_ms, sgmc_active }
    }
}
