//! Patch-token transformer backbone and feature-pyramid neck.
//!
//! The deepest pyramid level is the token grid enriched with pooled context at
//! several bin sizes. Each shallower level doubles the resolution: the level
//! above is upsampled and projected, an intermediate backbone feature is lifted
//! to the same size with a transposed convolution, and the sum is refined by a
//! 3x3 convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{map_to_tokens, tokens_to_map, Attention, Conv, LayerNorm, Linear, Mlp, Pointwise, Store, Upsample, G};
use crate::numerics::{init, NumericsError, ParamId, Tensor, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("frame {height}x{width} is not divisible by patch size {patch}")]
    Indivisible { height: usize, width: usize, patch: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub pyramid_levels: usize,
    pub pool_bins: Vec<usize>,
    pub in_channels: usize,
    pub mlp_ratio: usize,
    /// Learned positional embedding grid side; resized bilinearly to other grids.
    pub pos_grid: usize,
    pub pos_embed: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            pyramid_levels: 3,
            pool_bins: vec![1, 2, 3, 6],
            in_channels: 1,
            mlp_ratio: 2,
            pos_grid: 16,
            pos_embed: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.patch_size == 0 || self.depth == 0 || self.in_channels == 0 || self.mlp_ratio == 0 {
            return bad("patch_size, depth, in_channels and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.pyramid_levels < 2 {
            return bad("pyramid_levels must be at least 2".into());
        }
        if self.embed_dim % 4 != 0 || self.embed_dim >> (self.pyramid_levels - 1) == 0 {
            return bad(format!(
                "embed_dim {} too small for {} pyramid levels",
                self.embed_dim, self.pyramid_levels
            ));
        }
        if self.pool_bins.is_empty() || self.pool_bins.contains(&0) {
            return bad("pool_bins must be non-empty and positive".into());
        }
        if self.pos_embed && self.pos_grid == 0 {
            return bad("pos_grid must be positive".into());
        }
        Ok(())
    }

    /// Channel width of pyramid level `i` (0 = deepest).
    pub fn level_channels(&self, i: usize) -> usize {
        self.embed_dim >> i
    }

    /// Backbone block (1-based) whose output feeds pyramid level `i > 0`.
    pub fn lateral_block(&self, i: usize) -> usize {
        (self.depth >> i).max(1)
    }

    /// Closed-form parameter count of [`Encoder`].
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let patch_in = self.in_channels * self.patch_size * self.patch_size;
        let mut n = Linear::count(patch_in, d);
        if self.pos_embed {
            n += d * self.pos_grid * self.pos_grid;
        }
        let block = 2 * LayerNorm::count(d) + Attention::count(d) + Mlp::count(d, d * self.mlp_ratio);
        n += self.depth * block;
        let branch = d / 4;
        n += self.pool_bins.len() * Pointwise::count(d, branch);
        n += Pointwise::count(d + self.pool_bins.len() * branch, d);
        for i in 1..self.pyramid_levels {
            let (prev, c) = (self.level_channels(i - 1), self.level_channels(i));
            n += Pointwise::count(prev, c) + Upsample::count(d, c, 1 << i) + Conv::count(c, c, 3);
        }
        n
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct Level {
    top: Pointwise,
    lateral: Upsample,
    refine: Conv,
}

/// Backbone output: the `[D, h, w]` token map plus every block's `[h*w, D]` output.
#[derive(Debug, Clone)]
pub struct EncodedFrame {
    pub tokens: Var,
    pub block_outputs: Vec<Var>,
    pub grid: (usize, usize),
}

/// Pyramid levels, deepest (lowest resolution) first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    patch: Linear,
    pos: Option<ParamId>,
    blocks: Vec<Block>,
    pool: Vec<Pointwise>,
    pool_fuse: Pointwise,
    levels: Vec<Level>,
}

/// Rearrange `[C, H, W]` into `[(H/p)*(W/p), C*p*p]` patch rows.
pub fn patchify(image: &Tensor<f32>, p: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    if h % p != 0 || w % p != 0 {
        return Err(EncoderError::Indivisible { height: h, width: w, patch: p });
    }
    let (gh, gw) = (h / p, w / p);
    let cols = c * p * p;
    let src = image.data();
    let mut out = vec![0.0f32; gh * gw * cols];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * cols..][..cols];
            for ch in 0..c {
                for dy in 0..p {
                    let s = (ch * h + gy * p + dy) * w + gx * p;
                    row[(ch * p + dy) * p..][..p].copy_from_slice(&src[s..s + p]);
                }
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, cols], out)?)
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut Store, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch_in = config.in_channels * config.patch_size * config.patch_size;
        let patch = Linear::new(store, "encoder.patch", patch_in, d, rng)?;
        let pos = if config.pos_embed {
            let g = config.pos_grid;
            Some(store.register("encoder.pos", init::normal(&[d, g, g], 0.02, rng))?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("encoder.block{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                attn: Attention::new(store, &format!("{p}.attn"), d, config.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                mlp: Mlp::new(store, &format!("{p}.mlp"), d, d * config.mlp_ratio, rng)?,
            });
        }
        let branch = d / 4;
        let pool = config
            .pool_bins
            .iter()
            .map(|b| Pointwise::new(store, &format!("pyramid.pool{b}"), d, branch, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let pool_fuse = Pointwise::new(store, "pyramid.pool_fuse", d + config.pool_bins.len() * branch, d, rng)?;
        let mut levels = Vec::new();
        for i in 1..config.pyramid_levels {
            let (prev, c) = (config.level_channels(i - 1), config.level_channels(i));
            levels.push(Level {
                top: Pointwise::new(store, &format!("pyramid.level{i}.top"), prev, c, rng)?,
                lateral: Upsample::new(store, &format!("pyramid.level{i}.lateral"), d, c, 1 << i, rng)?,
                refine: Conv::new(store, &format!("pyramid.level{i}.refine"), c, c, 3, rng)?,
            });
        }
        Ok(Encoder { config, patch, pos, blocks, pool, pool_fuse, levels })
    }

    /// Patch embedding, positional embedding and the transformer blocks.
    pub fn encode(&self, g: &mut G, ps: &Store, image: &Tensor<f32>) -> Result<EncodedFrame> {
        let cfg = &self.config;
        if image.rank() != 3 || image.dim(0) != cfg.in_channels {
            return Err(EncoderError::Config(format!(
                "expected a [{}, H, W] image, got {:?}",
                cfg.in_channels,
                image.shape()
            )));
        }
        let p = cfg.patch_size;
        let (gh, gw) = (image.dim(1) / p, image.dim(2) / p);
        let patches = g.constant(patchify(image, p)?);
        let mut x = self.patch.forward(g, ps, patches)?;
        if let Some(pos) = self.pos {
            let mut pe = g.param(ps, pos);
            if (gh, gw) != (cfg.pos_grid, cfg.pos_grid) {
                pe = g.resize_bilinear(pe, gh, gw)?;
            }
            let pe = map_to_tokens(g, pe)?;
            x = g.add(x, pe)?;
        }
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = b.ln1.forward(g, ps, x)?;
            let h = b.attn.forward(g, ps, h, h, h)?;
            x = g.add(x, h)?;
            let h = b.ln2.forward(g, ps, x)?;
            let h = b.mlp.forward(g, ps, h)?;
            x = g.add(x, h)?;
            block_outputs.push(x);
        }
        let tokens = tokens_to_map(g, x, gh, gw)?;
        Ok(EncodedFrame { tokens, block_outputs, grid: (gh, gw) })
    }

    /// Pooled-context branch for one bin size: pool, project, relu, upsample back.
    pub(crate) fn pool_branch(&self, g: &mut G, ps: &Store, tokens: Var, index: usize) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        let bins = self.config.pool_bins[index];
        let pooled = g.adaptive_avg_pool(tokens, bins.min(s[1]), bins.min(s[2]))?;
        let y = self.pool[index].forward(g, ps, pooled)?;
        let y = g.relu(y)?;
        Ok(g.resize_bilinear(y, s[1], s[2])?)
    }

    /// Build the feature pyramid from an encoded frame.
    pub fn pyramid(&self, g: &mut G, ps: &Store, enc: &EncodedFrame) -> Result<FeaturePyramid> {
        let (gh, gw) = enc.grid;
        let mut parts = vec![enc.tokens];
        for i in 0..self.pool.len() {
            parts.push(self.pool_branch(g, ps, enc.tokens, i)?);
        }
        let cat = g.concat(&parts)?;
        let fused = self.pool_fuse.forward(g, ps, cat)?;
        let mut levels = vec![g.relu(fused)?];
        for (k, level) in self.levels.iter().enumerate() {
            let i = k + 1;
            let prev = levels[k];
            let (h, w) = (gh << i, gw << i);
            let up = g.resize_bilinear(prev, h, w)?;
            let top = level.top.forward(g, ps, up)?;
            let src = enc.block_outputs[self.config.lateral_block(i) - 1];
            let src = tokens_to_map(g, src, gh, gw)?;
            let lat = level.lateral.forward(g, ps, src)?;
            let sum = g.add(top, lat)?;
            let y = level.refine.forward(g, ps, sum)?;
            levels.push(g.relu(y)?);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Encode one image with a fresh graph and return the `[D, H/p, W/p]` token map.
pub fn encode_frame(encoder: &Encoder, ps: &Store, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = G::new();
    let enc = encoder.encode(&mut g, ps, image)?;
    Ok(g.take_value(enc.tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::zero_param;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: EncoderConfig) -> (Encoder, Store) {
        let mut store = Store::new();
        let enc = Encoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (enc, store)
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn token_grid_shape() {
        let (enc, ps) = build(EncoderConfig::default());
        let out = encode_frame(&enc, &ps, &image(128, 128, 0)).unwrap();
        assert_eq!(out.shape(), &[64, 16, 16]);
        assert!(out.all_finite());
    }

    #[test]
    fn identical_frames_identical_outputs() {
        let (enc, ps) = build(EncoderConfig::default());
        let img = image(64, 96, 3);
        assert_eq!(encode_frame(&enc, &ps, &img).unwrap(), encode_frame(&enc, &ps, &img).unwrap());
    }

    #[test]
    fn indivisible_frames_are_rejected() {
        let (enc, ps) = build(EncoderConfig::default());
        let err = encode_frame(&enc, &ps, &image(60, 64, 0)).unwrap_err();
        assert!(matches!(err, EncoderError::Indivisible { height: 60, .. }));
    }

    #[test]
    fn zeroed_final_residual_branch_is_identity() {
        let (enc, mut ps) = build(EncoderConfig::default());
        let last = enc.blocks.last().unwrap().clone();
        for id in [last.attn.o.w, last.attn.o.b, last.mlp.fc2.w, last.mlp.fc2.b] {
            zero_param(&mut ps, id);
        }
        let mut g = G::new();
        let out = enc.encode(&mut g, &ps, &image(64, 64, 5)).unwrap();
        let n = out.block_outputs.len();
        assert_eq!(g.value(out.block_outputs[n - 1]), g.value(out.block_outputs[n - 2]));
    }

    #[test]
    fn pyramid_doubles_per_level() {
        let (enc, ps) = build(EncoderConfig::default());
        let mut g = G::new();
        let out = enc.encode(&mut g, &ps, &image(128, 128, 0)).unwrap();
        let pyr = enc.pyramid(&mut g, &ps, &out).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.levels.iter().map(|&l| g.shape(l).to_vec()).collect();
        assert_eq!(shapes, vec![vec![64, 16, 16], vec![32, 32, 32], vec![16, 64, 64]]);
        assert!(pyr.levels.iter().all(|&l| g.value(l).all_finite()));
    }

    #[test]
    fn single_bin_branch_is_global_mean_projection() {
        let cfg = EncoderConfig { pool_bins: vec![1], ..Default::default() };
        let (enc, ps) = build(cfg);
        let mut g = G::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tokens = g.constant(Tensor::from_fn(&[64, 6, 5], |_| rng.random_range(-1.0..1.0)));
        let branch = enc.pool_branch(&mut g, &ps, tokens, 0).unwrap();
        let out = g.value(branch);
        // Reference: mean per channel, then W x + b, then relu.
        let t = g.value(tokens);
        let means: Vec<f32> = (0..64).map(|c| t.data()[c * 30..(c + 1) * 30].iter().sum::<f32>() / 30.0).collect();
        let (w, b) = (ps.value(enc.pool[0].w), ps.value(enc.pool[0].b));
        for o in 0..16 {
            let z: f32 = (0..64).map(|c| w.data()[o * 64 + c] * means[c]).sum::<f32>() + b.data()[o];
            for &v in &out.data()[o * 30..(o + 1) * 30] {
                assert!((v - z.max(0.0)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn constant_tokens_give_constant_level_zero() {
        let (enc, ps) = build(EncoderConfig::default());
        let mut g = G::new();
        let tokens = g.constant(Tensor::from_fn(&[64, 16, 16], |i| (i / 256) as f32 * 0.01 - 0.3));
        let enc_out = EncodedFrame { tokens, block_outputs: vec![], grid: (16, 16) };
        let mut parts = vec![enc_out.tokens];
        for i in 0..enc.pool.len() {
            parts.push(enc.pool_branch(&mut g, &ps, tokens, i).unwrap());
        }
        let cat = g.concat(&parts).unwrap();
        let level0 = enc.pool_fuse.forward(&mut g, &ps, cat).unwrap();
        let v = g.value(level0);
        for c in 0..64 {
            let plane = &v.data()[c * 256..(c + 1) * 256];
            assert!(plane.iter().all(|&x| (x - plane[0]).abs() < 1e-5));
        }
    }

    #[test]
    fn parameter_count_is_closed_form() {
        for cfg in [
            EncoderConfig::default(),
            EncoderConfig { pos_embed: false, depth: 2, ..Default::default() },
            EncoderConfig { embed_dim: 32, heads: 2, pyramid_levels: 2, pool_bins: vec![1, 3], in_channels: 3, ..Default::default() },
        ] {
            let (enc, ps) = build(cfg.clone());
            assert_eq!(ps.numel(), cfg.param_count());
            assert_eq!(enc.config, cfg);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut store = Store::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            EncoderConfig { heads: 5, ..Default::default() },
            EncoderConfig { pyramid_levels: 1, ..Default::default() },
            EncoderConfig { pool_bins: vec![], ..Default::default() },
        ] {
            assert!(matches!(Encoder::new(cfg, &mut store, &mut rng), Err(EncoderError::Config(_))));
        }
    }

    #[test]
    fn circular_patch_shift_permutes_tokens() {
        let cfg = EncoderConfig { pos_embed: false, ..Default::default() };
        let (enc, ps) = build(cfg);
        let (h, w, p) = (48, 64, 8);
        let img = image(h, w, 7);
        let shifted = Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            img.data()[y * w + (x + w - p) % w]
        });
        let a = encode_frame(&enc, &ps, &img).unwrap();
        let b = encode_frame(&enc, &ps, &shifted).unwrap();
        let (gh, gw) = (h / p, w / p);
        for c in 0..64 {
            for y in 0..gh {
                for x in 0..gw {
                    let va = a.at3(c, y, x);
                    let vb = b.at3(c, y, (x + 1) % gw);
                    assert!((va - vb).abs() < 1e-4, "c{c} y{y} x{x}: {va} vs {vb}");
                }
            }
        }
    }

    #[test]
    fn outputs_finite_on_extreme_inputs() {
        let (enc, ps) = build(EncoderConfig::default());
        for v in [0.0, 1.0] {
            let img = Tensor::full(&[1, 64, 64], v);
            let mut g = G::new();
            let out = enc.encode(&mut g, &ps, &img).unwrap();
            let pyr = enc.pyramid(&mut g, &ps, &out).unwrap();
            assert!(pyr.levels.iter().all(|&l| g.value(l).all_finite()));
        }
    }
}
