//! Parameterised building blocks shared by the encoder, memory and decoder.

use rand::Rng;

use crate::numerics::{init, Graph, NumericsError, ParamId, ParamStore, Tensor, Var};

pub(crate) type G = Graph<f32>;
pub(crate) type Store = ParamStore<f32>;
type Result<T> = std::result::Result<T, NumericsError>;

/// Dense layer on row-major tokens: `[n, in] -> [n, out]`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut Store, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.register(&format!("{name}.w"), init::xavier(&[d_in, d_out], d_in, d_out, rng))?;
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, g: &mut G, ps: &Store, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }

    pub fn count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

/// 1x1 convolution on `[c_in, h, w]` maps; weight stored as `[c_out, c_in]`.
#[derive(Debug, Clone)]
pub(crate) struct Pointwise {
    pub w: ParamId,
    pub b: ParamId,
}

impl Pointwise {
    pub fn new(store: &mut Store, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.register(&format!("{name}.w"), init::xavier(&[c_out, c_in], c_in, c_out, rng))?;
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(Pointwise { w, b })
    }

    pub fn forward(&self, g: &mut G, ps: &Store, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(NumericsError::Shape(format!("pointwise conv expects [c,h,w], got {s:?}")));
        }
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(w, flat)?;
        let y = g.add_channel_bias(y, b)?;
        let co = g.shape(y)[0];
        g.reshape(y, &[co, s[1], s[2]])
    }

    pub fn count(c_in: usize, c_out: usize) -> usize {
        c_in * c_out + c_out
    }
}

/// Same-padded `k x k` convolution with bias.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new(store: &mut Store, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = c_in * k * k;
        let w = store.register(&format!("{name}.w"), init::normal(&[c_out, c_in, k, k], (2.0 / fan_in as f64).sqrt(), rng))?;
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(Conv { w, b })
    }

    pub fn forward(&self, g: &mut G, ps: &Store, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.conv2d(x, w)?;
        g.add_channel_bias(y, b)
    }

    pub fn count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_in * c_out * k * k + c_out
    }
}

/// Transposed convolution with kernel = stride (non-overlapping upsampling).
#[derive(Debug, Clone)]
pub(crate) struct Upsample {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Upsample {
    pub fn new(store: &mut Store, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.register(
            &format!("{name}.w"),
            init::normal(&[c_in, c_out, stride, stride], (1.0 / c_in as f64).sqrt(), rng),
        )?;
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(Upsample { w, b, stride })
    }

    pub fn forward(&self, g: &mut G, ps: &Store, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.conv_transpose2d(x, w, self.stride)?;
        g.add_channel_bias(y, b)
    }

    pub fn count(c_in: usize, c_out: usize, stride: usize) -> usize {
        c_in * c_out * stride * stride + c_out
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut Store, name: &str, d: usize) -> Result<Self> {
        let gamma = store.register(&format!("{name}.gamma"), Tensor::full(&[d], 1.0))?;
        let beta = store.register(&format!("{name}.beta"), Tensor::zeros(&[d]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, g: &mut G, ps: &Store, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn count(d: usize) -> usize {
        2 * d
    }
}

/// Multi-head attention with input and output projections.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut Store, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            heads,
        })
    }

    /// `q_in: [n_q, d]`, `k_in`/`v_in: [n_k, d]`.
    pub fn forward(&self, g: &mut G, ps: &Store, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
        let q = self.q.forward(g, ps, q_in)?;
        let k = self.k.forward(g, ps, k_in)?;
        let v = self.v.forward(g, ps, v_in)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.o.forward(g, ps, a)
    }

    pub fn count(d: usize) -> usize {
        4 * Linear::count(d, d)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut Store, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut G, ps: &Store, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, ps, h)
    }

    pub fn count(d: usize, hidden: usize) -> usize {
        Linear::count(d, hidden) + Linear::count(hidden, d)
    }
}

/// `[c, h, w]` map to `[h*w, c]` tokens.
pub(crate) fn map_to_tokens(g: &mut G, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// `[h*w, c]` tokens to a `[c, h, w]` map.
pub(crate) fn tokens_to_map(g: &mut G, x: Var, h: usize, w: usize) -> Result<Var> {
    let t = g.transpose(x)?;
    let c = g.shape(t)[0];
    g.reshape(t, &[c, h, w])
}

/// Zero a parameter in place (used to build exact-identity configurations in tests).
#[cfg(test)]
pub(crate) fn zero_param(store: &mut Store, id: ParamId) {
    store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}
