//! Differentiable tensor substrate: a dense tensor, a reverse-mode tape over the
//! handful of primitives the model uses, a parameter store, and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use gradcheck::{default_shapes, grad_check, GRAD_CHECK_OPS};
pub use graph::{Grads, Graph, Var, LOG_FLOOR};
pub use params::{init, ParamId, ParamStore, Parameter};
pub use tensor::{DType, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty key set")]
    EmptyKeySet,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
}

/// Multi-head scaled dot-product attention on plain tensors.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>, NumericsError> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(q, k, v, heads)?;
    Ok(g.take_value(out))
}

/// Depthwise `k×k` convolution followed by `1×1` pointwise mixing, same padding.
pub fn depthwise_separable_conv<T: Scalar>(
    x: &Tensor<T>,
    dw_kernel: &Tensor<T>,
    pw_kernel: &Tensor<T>,
) -> Result<Tensor<T>, NumericsError> {
    let mut g = Graph::new();
    let (x, dw, pw) = (
        g.constant(x.clone()),
        g.constant(dw_kernel.clone()),
        g.constant(pw_kernel.clone()),
    );
    let out = separable(&mut g, x, dw, pw)?;
    Ok(g.take_value(out))
}

/// Graph form of [`depthwise_separable_conv`]; `pw: [c_out, c_in]`.
pub fn separable<T: Scalar>(g: &mut Graph<T>, x: Var, dw: Var, pw: Var) -> Result<Var, NumericsError> {
    let s = g.shape(x).to_vec();
    let pws = g.shape(pw).to_vec();
    if pws.len() != 2 || pws[1] != s[0] {
        return Err(NumericsError::Shape(format!(
            "pointwise kernel {pws:?} does not match {} input channels",
            s[0]
        )));
    }
    let d = g.depthwise_conv2d(x, dw)?;
    let flat = g.reshape(d, &[s[0], s[1] * s[2]])?;
    let mixed = g.matmul(pw, flat)?;
    g.reshape(mixed, &[pws[0], s[1], s[2]])
}
