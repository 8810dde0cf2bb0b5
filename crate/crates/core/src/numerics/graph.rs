//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its forward value and whatever it needs for the
//! backward pass. Nodes that cannot reach a gradient-carrying leaf are skipped during
//! `backward`.

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Scalar, Tensor, View};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Lower clamp applied inside `ln` and the BCE paths.
pub const LOG_FLOOR: f64 = 1e-7;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    AddRowBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var },
    DepthwiseConv2d { x: Var, w: Var },
    ConvTranspose2d { x: Var, w: Var, stride: usize },
    ResizeBilinear(Var),
    AdaptiveAvgPool(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp { x: Var, lo: T, hi: T },
    Relu(Var),
    Gelu(Var),
    Mean(Var),
    Sum(Var),
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    SigmoidBce { logits: Var, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Shape(msg)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Load a parameter from the store as a gradient-tracked leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true, param: Some(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_value(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(shape_err(format!(
                "matmul inner dimensions differ: {sa:?}{} x {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let av = mat_view(self.value(a).data(), sa[1], ta);
        let bv = mat_view(self.value(b).data(), sb[1], tb);
        let mut out = vec![T::zero(); m * n];
        gemm(m, ka, n, T::one(), av, bv, T::zero(), &mut out, 0, n, 1);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err(format!("transpose needs a 2-D tensor, got {s:?}")));
        }
        let value = Tensor::new(&[s[1], s[0]], kernels::transpose(self.value(x).data(), s[0], s[1]))?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, c) = (T::of(scale), T::of(shift));
        let value = self.value(x).map(|v| s * v + c);
        Ok(self.push(value, Op::Affine { x, scale: s }, &[x]))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// Broadcast-add a vector along the last axis.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.value(bias).len() != d {
            return Err(shape_err(format!(
                "row bias of {} elements for trailing dim {d}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v = *v + bb;
            }
        }
        Ok(self.push(value, Op::AddRowBias { x, bias }, &[x, bias]))
    }

    /// Broadcast-add a vector along the first axis (per-channel bias on `[C, ...]`).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(bias).len() != c {
            return Err(shape_err(format!(
                "channel bias of {} elements for {c} channels",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        let inner = value.len() / c;
        for (chunk, &bb) in value.data_mut().chunks_mut(inner).zip(&b) {
            for v in chunk {
                *v = *v + bb;
            }
        }
        Ok(self.push(value, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::sigmoid);
        Ok(self.push(value, Op::Sigmoid(x), &[x]))
    }

    /// Natural log with the input clamped below at [`LOG_FLOOR`].
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let floor = T::of(LOG_FLOOR);
        let value = self.value(x).map(|v| v.max(floor).ln());
        Ok(self.push(value, Op::Ln(x), &[x]))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        Ok(self.push(value, Op::Clamp { x, lo, hi }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        Ok(self.push(value, Op::Relu(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| kernels::gelu(v).0);
        Ok(self.push(value, Op::Gelu(x), &[x]))
    }

    // ---------------------------------------------------------------- reductions / structure

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        Ok(self.push(value, Op::Mean(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        Ok(self.push(value, Op::Sum(x), &[x]))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err(format!("concat: trailing dims {:?} vs {tail:?}", &s[1..])));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(shape_err(format!("slice {start}..{} out of range for {s:?}", start + len)));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    // ---------------------------------------------------------------- normalisation

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            kernels::softmax_in_place(row);
        }
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err(format!("layer_norm affine params must have {d} elements")));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d;
        let mut out = vec![T::zero(); xs.len()];
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let eps = T::of(LN_EPS);
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &xs.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(xs.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    // ---------------------------------------------------------------- spatial

    /// Stride-1 same-padded convolution. `x: [c_in, h, w]`, `w: [c_out, c_in, k, k]`, odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(shape_err(format!("conv2d: input {sx:?} incompatible with kernel {sw:?}")));
        }
        let (ci, h, wd, co, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
        let cols = kernels::im2col(self.value(x).data(), ci, h, wd, k);
        let mut out = vec![T::zero(); co * h * wd];
        let kk = ci * k * k;
        gemm(
            co,
            kk,
            h * wd,
            T::one(),
            View::rows(self.value(w).data(), kk),
            View::rows(&cols, h * wd),
            T::zero(),
            &mut out,
            0,
            h * wd,
            1,
        );
        let value = Tensor::new(&[co, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { x, w }, &[x, w]))
    }

    /// Per-channel same-padded convolution. `x: [c, h, w]`, `w: [c, k, k]`, odd `k`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[0] != sx[0] || sw[1] != sw[2] || sw[1] % 2 == 0 {
            return Err(shape_err(format!(
                "depthwise conv: input {sx:?} incompatible with kernel {sw:?}"
            )));
        }
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            sx[0],
            sx[1],
            sx[2],
            sw[1],
        );
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(value, Op::DepthwiseConv2d { x, w }, &[x, w]))
    }

    /// Transposed convolution without padding. `x: [c_in, h, w]`, `w: [c_in, c_out, k, k]`;
    /// output spatial size is `(h - 1) * stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] || stride == 0 {
            return Err(shape_err(format!(
                "conv_transpose2d: input {sx:?} incompatible with kernel {sw:?}"
            )));
        }
        let (ci, h, wd, co, k) = (sx[0], sx[1], sx[2], sw[1], sw[2]);
        let ckk = co * k * k;
        let mut cols = vec![T::zero(); ckk * h * wd];
        gemm(
            ckk,
            ci,
            h * wd,
            T::one(),
            View::transposed(self.value(w).data(), ckk),
            View::rows(self.value(x).data(), h * wd),
            T::zero(),
            &mut cols,
            0,
            h * wd,
            1,
        );
        let (oh, ow) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        let out = kernels::convt_scatter(&cols, co, k, h, wd, stride, oh, ow);
        let value = Tensor::new(&[co, oh, ow], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, stride }, &[x, w]))
    }

    /// Bilinear resize of `[c, h, w]` (half-pixel centres, edge clamped).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(shape_err(format!("resize: need [c,h,w] and a non-empty target, got {s:?}")));
        }
        let out = kernels::resize_forward(self.value(x).data(), s[0], s[1], s[2], out_h, out_w);
        let value = Tensor::new(&[s[0], out_h, out_w], out)?;
        Ok(self.push(value, Op::ResizeBilinear(x), &[x]))
    }

    /// Adaptive average pooling of `[c, h, w]` to `[c, bins_h, bins_w]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, bins_h: usize, bins_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || bins_h == 0 || bins_w == 0 || bins_h > s[1] || bins_w > s[2] {
            return Err(shape_err(format!("adaptive pool to {bins_h}x{bins_w} from {s:?}")));
        }
        let out = kernels::pool_forward(self.value(x).data(), s[0], s[1], s[2], bins_h, bins_w);
        let value = Tensor::new(&[s[0], bins_h, bins_w], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool(x), &[x]))
    }

    // ---------------------------------------------------------------- attention / loss

    /// Multi-head scaled dot-product attention over row-major token matrices.
    /// `q: [n_q, d]`, `k: [n_k, d]`, `v: [n_k, d_v]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
            return Err(shape_err("attention operands must be 2-D".into()));
        }
        if sk[0] == 0 || sv[0] == 0 {
            return Err(NumericsError::EmptyKeySet);
        }
        if heads == 0 || sq[1] != sk[1] || sk[0] != sv[0] || sq[1] % heads != 0 || sv[1] % heads != 0 {
            return Err(shape_err(format!(
                "attention: q {sq:?}, k {sk:?}, v {sv:?} with {heads} heads"
            )));
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            sq[0],
            sk[0],
            sq[1],
            sv[1],
            heads,
        );
        let value = Tensor::new(&[sq[0], sv[1]], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant target.
    ///
    /// Per-pixel loss is capped at `-ln(LOG_FLOOR)`, matching the clamped-probability
    /// form; the gradient is the unclamped `sigmoid(z) - y` so saturated pixels still learn.
    pub fn sigmoid_bce(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_len(logits, target.len(), "sigmoid_bce")?;
        let cap = T::of(-LOG_FLOOR.ln());
        let z = self.value(logits).data();
        let mut total = T::zero();
        // Written as a comparison so a NaN logit stays NaN instead of being capped.
        let capped = |v: T| if v > cap { cap } else { v };
        for (&zi, &yi) in z.iter().zip(target.data()) {
            // -ln σ(z) = softplus(-z); -ln(1-σ(z)) = softplus(z)
            let pos = capped(kernels::softplus(-zi));
            let neg = capped(kernels::softplus(zi));
            total = total + yi * pos + (T::one() - yi) * neg;
        }
        let value = Tensor::scalar(total / T::of(z.len() as f64));
        let target = target.data().to_vec();
        Ok(self.push(value, Op::SigmoidBce { logits, target }, &[logits]))
    }

    fn check_len(&self, v: Var, n: usize, what: &str) -> Result<()> {
        if self.value(v).len() != n {
            return Err(shape_err(format!(
                "{what}: {} elements vs {n}",
                self.value(v).len()
            )));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Grads { grads })
    }

    /// Add every parameter leaf's gradient into the store.
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                store.accumulate_grad(id, g);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        let t = Tensor::new(self.shape(v), data).expect("gradient shape");
        self.acc(grads, v, t);
    }

    fn backward_node(&self, idx: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let gv = View::rows(g, n);
                if self.wants(*a) {
                    // dA = dC · Bᵀ, written through A's storage layout.
                    let bt = mat_view(self.value(*b).data(), sb[1], *tb).t();
                    let mut da = vec![T::zero(); m * k];
                    let (rs, cs) = if *ta { (1, m) } else { (k, 1) };
                    gemm(m, n, k, T::one(), gv, bt, T::zero(), &mut da, 0, rs, cs);
                    self.acc_data(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let at = mat_view(self.value(*a).data(), sa[1], *ta).t();
                    let mut db = vec![T::zero(); k * n];
                    let (rs, cs) = if *tb { (1, k) } else { (n, 1) };
                    gemm(k, m, n, T::one(), at, gv, T::zero(), &mut db, 0, rs, cs);
                    self.acc_data(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let vb = self.value(*b).data();
                    self.acc_data(grads, *a, g.iter().zip(vb).map(|(&d, &x)| d * x).collect());
                }
                if self.wants(*b) {
                    let va = self.value(*a).data();
                    self.acc_data(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.acc(grads, *x, gy.map(|v| v * s));
            }
            Op::AddRowBias { x, bias } => {
                self.acc(grads, *x, gy.clone());
                if self.wants(*bias) {
                    let d = self.value(*bias).len();
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    self.acc_data(grads, *bias, db);
                }
            }
            Op::AddChannelBias { x, bias } => {
                self.acc(grads, *x, gy.clone());
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let inner = g.len() / c;
                    let db = g
                        .chunks(inner)
                        .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    self.acc_data(grads, *bias, db);
                }
            }
            Op::Transpose(x) => {
                let s = y.shape();
                self.acc_data(grads, *x, kernels::transpose(g, s[0], s[1]));
            }
            Op::Reshape(x) => {
                self.acc_data(grads, *x, g.to_vec());
            }
            Op::Softmax(x) => {
                let d = *y.shape().last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((yr, gr), dr) in y.data().chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    kernels::softmax_backward_row(yr, gr, dr);
                }
                self.acc_data(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *y.shape().last().unwrap();
                let gm = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let dn = T::of(d as f64);
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            dx[r * d + j] = rstd[r] * (dxh - m1 - xr[j] * m2);
                        }
                    }
                    self.acc_data(grads, *x, dx);
                }
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * xr[j];
                            db[j] = db[j] + gr[j];
                        }
                    }
                    self.acc_data(grads, *gamma, dg);
                    self.acc_data(grads, *beta, db);
                }
            }
            Op::Conv2d { x, w } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (ci, h, wd, co, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
                let kk = ci * k * k;
                let hw = h * wd;
                if self.wants(*w) {
                    let cols = kernels::im2col(self.value(*x).data(), ci, h, wd, k);
                    let mut dw = vec![T::zero(); co * kk];
                    gemm(
                        co,
                        hw,
                        kk,
                        T::one(),
                        View::rows(g, hw),
                        View::transposed(&cols, hw),
                        T::zero(),
                        &mut dw,
                        0,
                        kk,
                        1,
                    );
                    self.acc_data(grads, *w, dw);
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); kk * hw];
                    gemm(
                        kk,
                        co,
                        hw,
                        T::one(),
                        View::transposed(self.value(*w).data(), kk),
                        View::rows(g, hw),
                        T::zero(),
                        &mut dcols,
                        0,
                        hw,
                        1,
                    );
                    self.acc_data(grads, *x, kernels::col2im(&dcols, ci, h, wd, k));
                }
            }
            Op::DepthwiseConv2d { x, w } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (dx, dw) = kernels::depthwise_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    sx[0],
                    sx[1],
                    sx[2],
                    sw[1],
                );
                self.acc_data(grads, *x, dx);
                self.acc_data(grads, *w, dw);
            }
            Op::ConvTranspose2d { x, w, stride } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (ci, h, wd, co, k) = (sx[0], sx[1], sx[2], sw[1], sw[2]);
                let ckk = co * k * k;
                let hw = h * wd;
                let (oh, ow) = (y.shape()[1], y.shape()[2]);
                let dcols = kernels::convt_gather(g, co, k, h, wd, *stride, oh, ow);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); ci * hw];
                    gemm(
                        ci,
                        ckk,
                        hw,
                        T::one(),
                        View::rows(self.value(*w).data(), ckk),
                        View::rows(&dcols, hw),
                        T::zero(),
                        &mut dx,
                        0,
                        hw,
                        1,
                    );
                    self.acc_data(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); ci * ckk];
                    gemm(
                        ci,
                        hw,
                        ckk,
                        T::one(),
                        View::rows(self.value(*x).data(), hw),
                        View::transposed(&dcols, hw),
                        T::zero(),
                        &mut dw,
                        0,
                        ckk,
                        1,
                    );
                    self.acc_data(grads, *w, dw);
                }
            }
            Op::ResizeBilinear(x) => {
                let s = self.shape(*x);
                let (oh, ow) = (y.shape()[1], y.shape()[2]);
                self.acc_data(grads, *x, kernels::resize_backward(g, s[0], s[1], s[2], oh, ow));
            }
            Op::AdaptiveAvgPool(x) => {
                let s = self.shape(*x);
                let (bh, bw) = (y.shape()[1], y.shape()[2]);
                self.acc_data(grads, *x, kernels::pool_backward(g, s[0], s[1], s[2], bh, bw));
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(y.data()).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                self.acc_data(grads, *x, dx);
            }
            Op::Ln(x) => {
                let floor = T::of(LOG_FLOOR);
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v < floor { T::zero() } else { d / v })
                    .collect();
                self.acc_data(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v < *lo || v > *hi { T::zero() } else { d })
                    .collect();
                self.acc_data(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.acc_data(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| d * kernels::gelu(v).1)
                    .collect();
                self.acc_data(grads, *x, dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = g[0] / T::of(n as f64);
                self.acc(grads, *x, Tensor::full(self.shape(*x), v));
            }
            Op::Sum(x) => {
                self.acc(grads, *x, Tensor::full(self.shape(*x), g[0]));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        self.acc_data(grads, *p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let inner = g.len() / y.shape()[0];
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    dx[start * inner..start * inner + g.len()].copy_from_slice(g);
                    self.acc_data(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (sq, sk, sv) = (self.shape(*q), self.shape(*k), self.shape(*v));
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    sq[0],
                    sk[0],
                    sq[1],
                    sv[1],
                    *heads,
                );
                self.acc_data(grads, *q, dq);
                self.acc_data(grads, *k, dk);
                self.acc_data(grads, *v, dv);
            }
            Op::SigmoidBce { logits, target } => {
                let z = self.value(*logits).data();
                let scale = g[0] / T::of(z.len() as f64);
                let dz = z
                    .iter()
                    .zip(target)
                    .map(|(&zi, &yi)| (kernels::sigmoid(zi) - yi) * scale)
                    .collect();
                self.acc_data(grads, *logits, dz);
            }
        }
    }
}

fn mat_view<T>(data: &[T], stored_cols: usize, transposed: bool) -> View<'_, T> {
    if transposed {
        View::transposed(data, stored_cols)
    } else {
        View::rows(data, stored_cols)
    }
}
