//! Central-difference verification of the tape's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::NumericsError;

/// Every primitive the checker knows how to exercise.
pub const GRAD_CHECK_OPS: &[&str] = &[
    "matmul",
    "matmul_t",
    "add",
    "sub",
    "mul",
    "affine",
    "add_row_bias",
    "add_channel_bias",
    "transpose",
    "reshape",
    "softmax",
    "layer_norm",
    "conv2d",
    "depthwise_conv2d",
    "depthwise_separable_conv",
    "conv_transpose2d",
    "resize_bilinear",
    "adaptive_avg_pool",
    "sigmoid",
    "ln",
    "clamp",
    "relu",
    "gelu",
    "mean",
    "sum",
    "concat",
    "slice_rows",
    "attention",
    "sigmoid_bce",
];

const STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so near-zero gradients compare absolutely.
const REL_FLOOR: f64 = 1e-3;

/// Default input shapes used by the CLI and the gradient suite.
pub fn default_shapes(op_id: &str) -> Result<Vec<Vec<usize>>, NumericsError> {
    let s: Vec<Vec<usize>> = match op_id {
        "matmul" => vec![vec![3, 4], vec![4, 5]],
        "matmul_t" => vec![vec![4, 3], vec![5, 4]],
        "add" | "sub" | "mul" => vec![vec![3, 4], vec![3, 4]],
        "affine" | "sigmoid" | "ln" => vec![vec![4]],
        "clamp" | "relu" | "gelu" => vec![vec![6]],
        "mean" | "sum" => vec![vec![5]],
        "add_row_bias" => vec![vec![3, 4], vec![4]],
        "add_channel_bias" => vec![vec![3, 2, 2], vec![3]],
        "transpose" | "reshape" => vec![vec![3, 4]],
        "softmax" => vec![vec![8]],
        "layer_norm" => vec![vec![3, 6], vec![6], vec![6]],
        "conv2d" => vec![vec![2, 5, 5], vec![3, 2, 3, 3]],
        "depthwise_conv2d" => vec![vec![2, 5, 5], vec![2, 3, 3]],
        "depthwise_separable_conv" => vec![vec![2, 5, 5], vec![2, 3, 3], vec![4, 2]],
        "conv_transpose2d" => vec![vec![3, 3, 3], vec![3, 2, 2, 2]],
        "resize_bilinear" => vec![vec![2, 3, 4]],
        "adaptive_avg_pool" => vec![vec![2, 6, 5]],
        "concat" => vec![vec![2, 3], vec![1, 3]],
        "slice_rows" => vec![vec![4, 3]],
        "attention" => vec![vec![4, 8], vec![5, 8], vec![5, 4]],
        "sigmoid_bce" => vec![vec![6]],
        other => return Err(NumericsError::UnknownOp(other.to_string())),
    };
    Ok(s)
}

fn arity(op_id: &str) -> Result<usize, NumericsError> {
    Ok(default_shapes(op_id)?.len())
}

fn build(op_id: &str, g: &mut Graph<f64>, x: &[Var], aux: &Aux) -> Result<Var, NumericsError> {
    match op_id {
        "matmul" => g.matmul(x[0], x[1]),
        "matmul_t" => g.matmul_t(x[0], x[1], true, true),
        "add" => g.add(x[0], x[1]),
        "sub" => g.sub(x[0], x[1]),
        "mul" => g.mul(x[0], x[1]),
        "affine" => g.affine(x[0], -1.7, 0.3),
        "add_row_bias" => g.add_row_bias(x[0], x[1]),
        "add_channel_bias" => g.add_channel_bias(x[0], x[1]),
        "transpose" => g.transpose(x[0]),
        "reshape" => {
            let n = g.value(x[0]).len();
            g.reshape(x[0], &[n])
        }
        "softmax" => g.softmax(x[0]),
        "layer_norm" => g.layer_norm(x[0], x[1], x[2]),
        "conv2d" => g.conv2d(x[0], x[1]),
        "depthwise_conv2d" => g.depthwise_conv2d(x[0], x[1]),
        "depthwise_separable_conv" => super::separable(g, x[0], x[1], x[2]),
        "conv_transpose2d" => g.conv_transpose2d(x[0], x[1], 2),
        "resize_bilinear" => {
            let s = g.shape(x[0]).to_vec();
            g.resize_bilinear(x[0], s[1] * 2 - 1, s[2] * 2 - 1)
        }
        "adaptive_avg_pool" => {
            let s = g.shape(x[0]).to_vec();
            g.adaptive_avg_pool(x[0], s[1].div_ceil(2), s[2].div_ceil(2))
        }
        "sigmoid" => g.sigmoid(x[0]),
        "ln" => g.ln(x[0]),
        "clamp" => g.clamp(x[0], -0.5, 0.5),
        "relu" => g.relu(x[0]),
        "gelu" => g.gelu(x[0]),
        "mean" => g.mean(x[0]),
        "sum" => g.sum(x[0]),
        "concat" => g.concat(&[x[0], x[1]]),
        "slice_rows" => {
            let rows = g.shape(x[0])[0];
            g.slice_rows(x[0], 1, rows.saturating_sub(2).max(1))
        }
        "attention" => {
            let heads = if g.shape(x[0])[1] % 2 == 0 && g.shape(x[2])[1] % 2 == 0 { 2 } else { 1 };
            g.attention(x[0], x[1], x[2], heads)
        }
        "sigmoid_bce" => g.sigmoid_bce(x[0], &aux.target),
        other => Err(NumericsError::UnknownOp(other.to_string())),
    }
}

struct Aux {
    target: Tensor<f64>,
}

struct Scalarized {
    graph: Graph<f64>,
    inputs: Vec<Var>,
    output: Var,
    loss: Option<Var>,
}

fn scalarized(
    op_id: &str,
    inputs: &[Tensor<f64>],
    weights: Option<&Tensor<f64>>,
    aux: &Aux,
    track: bool,
) -> Result<Scalarized, NumericsError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { g.input(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = build(op_id, &mut g, &vars, aux)?;
    let loss = match weights {
        Some(w) => {
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv)?;
            Some(g.sum(prod)?)
        }
        None => None,
    };
    Ok(Scalarized { graph: g, inputs: vars, output: out, loss })
}

/// Max relative error between analytic and central-difference gradients of
/// `sum(op(inputs) ⊙ R)` for random inputs and random `R`, all in f64.
///
/// The relative error of one element is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn grad_check(op_id: &str, input_shapes: &[Vec<usize>], seed: u64) -> Result<f64, NumericsError> {
    let n_inputs = arity(op_id)?;
    if input_shapes.len() != n_inputs {
        return Err(NumericsError::Shape(format!(
            "`{op_id}` takes {n_inputs} inputs, got {} shapes",
            input_shapes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = if op_id == "ln" { (0.2, 1.5) } else { (-1.0, 1.0) };
    let inputs: Vec<Tensor<f64>> = input_shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| rng.random_range(lo..hi)))
        .collect();
    let target = Tensor::from_fn(&input_shapes[0], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let aux = Aux { target };

    // Probe once to learn the output shape, then draw the projection weights.
    let probe = scalarized(op_id, &inputs, None, &aux, false)?;
    let out_shape = probe.graph.shape(probe.output).to_vec();
    let weights = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));

    let tracked = scalarized(op_id, &inputs, Some(&weights), &aux, true)?;
    let grads = tracked.graph.backward(tracked.loss.expect("weighted"))?;
    let vars = tracked.inputs;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let s = scalarized(op_id, inputs, Some(&weights), &aux, false)?;
        Ok(s.graph.value(s.loss.expect("weighted")).data()[0])
    };

    let mut worst = 0.0f64;
    let mut perturbed = inputs.clone();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + STEP;
            let plus = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = orig - STEP;
            let minus = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_passes_at_default_shapes() {
        for op in GRAD_CHECK_OPS {
            let shapes = default_shapes(op).unwrap();
            let err = grad_check(op, &shapes, 0).unwrap();
            assert!(err <= 1e-6, "{op}: relative error {err}");
        }
    }

    #[test]
    fn spec_examples() {
        assert!(grad_check("sigmoid", &[vec![4]], 1).unwrap() <= 1e-6);
        assert!(grad_check("softmax", &[vec![8]], 1).unwrap() <= 1e-5);
        let shapes = vec![vec![2, 5, 5], vec![2, 3, 3], vec![4, 2]];
        assert!(grad_check("depthwise_separable_conv", &shapes, 1).unwrap() <= 1e-5);
    }

    #[test]
    fn unknown_op_is_an_error() {
        assert_eq!(
            grad_check("fft", &[vec![4]], 0),
            Err(NumericsError::UnknownOp("fft".into()))
        );
    }

    #[test]
    fn wrong_arity_is_an_error() {
        assert!(matches!(grad_check("matmul", &[vec![2, 2]], 0), Err(NumericsError::Shape(_))));
    }
}
