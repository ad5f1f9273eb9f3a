//! Shared model building blocks composed on the tape: linear layers,
//! multi-head attention, pre-LN transformer blocks, and fixed sinusoidal
//! embeddings. Parameters are addressed by dotted names under a caller
//! prefix so whole models serialize naturally.

use rand::Rng;

use crate::numerics::{Graph, NodeId, Params, Tensor};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Additive mask value; finite so tensors never carry infinities, yet small
/// enough that masked softmax entries underflow to exactly zero.
pub const MASK_VALUE: f64 = -1e30;

/// Read-only view over a parameter store that pushes leaves as either
/// trainable or frozen (constant) nodes.
#[derive(Clone, Copy)]
pub struct ParamView<'a> {
    pub params: &'a Params,
    pub frozen: bool,
}

impl<'a> ParamView<'a> {
    pub fn trainable(params: &'a Params) -> Self {
        ParamView { params, frozen: false }
    }

    pub fn frozen(params: &'a Params) -> Self {
        ParamView { params, frozen: true }
    }

    pub fn node(&self, g: &mut Graph, name: &str) -> NodeId {
        if self.frozen {
            self.params.node_frozen(g, name)
        } else {
            self.params.node(g, name)
        }
    }
}

pub fn init_linear(params: &mut Params, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) {
    params.add_normal(&format!("{name}.w"), vec![d_in, d_out], INIT_STD, rng);
    params.add_zeros(&format!("{name}.b"), vec![d_out]);
}

pub fn linear(g: &mut Graph, pv: &ParamView, x: NodeId, name: &str) -> NodeId {
    let w = pv.node(g, &format!("{name}.w"));
    let b = pv.node(g, &format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add_bias(y, b)
}

pub fn init_layer_norm(params: &mut Params, name: &str, dim: usize) {
    params.add_ones(&format!("{name}.g"), vec![dim]);
    params.add_zeros(&format!("{name}.b"), vec![dim]);
}

pub fn layer_norm(g: &mut Graph, pv: &ParamView, x: NodeId, name: &str) -> NodeId {
    let gamma = pv.node(g, &format!("{name}.g"));
    let beta = pv.node(g, &format!("{name}.b"));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Additive causal mask constant: 0 on and below the diagonal.
pub fn causal_mask(g: &mut Graph, t: usize) -> NodeId {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = MASK_VALUE;
        }
    }
    g.constant(Tensor::matrix(t, t, data))
}

pub fn init_attention(params: &mut Params, prefix: &str, dim: usize, rng: &mut impl Rng) {
    for part in ["wq", "wk", "wv", "wo"] {
        init_linear(params, &format!("{prefix}.{part}"), dim, dim, rng);
    }
}

/// Multi-head self-attention over x: [t, dim].
pub fn attention(
    g: &mut Graph,
    pv: &ParamView,
    x: NodeId,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> NodeId {
    let t = g.value(x).rows();
    let dim = g.value(x).cols();
    assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
    let dh = dim / heads;
    let q = linear(g, pv, x, &format!("{prefix}.wq"));
    let k = linear(g, pv, x, &format!("{prefix}.wk"));
    let v = linear(g, pv, x, &format!("{prefix}.wv"));
    let mask = if causal { Some(causal_mask(g, t)) } else { None };
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let masked = match mask {
            Some(m) => g.add(scaled, m),
            None => scaled,
        };
        let probs = g.softmax(masked);
        head_outs.push(g.matmul(probs, vh));
    }
    let cat = g.concat_cols(&head_outs);
    linear(g, pv, cat, &format!("{prefix}.wo"))
}

pub fn init_mlp(params: &mut Params, prefix: &str, dim: usize, rng: &mut impl Rng) {
    init_linear(params, &format!("{prefix}.fc1"), dim, 4 * dim, rng);
    init_linear(params, &format!("{prefix}.fc2"), 4 * dim, dim, rng);
}

pub fn mlp(g: &mut Graph, pv: &ParamView, x: NodeId, prefix: &str) -> NodeId {
    let h = linear(g, pv, x, &format!("{prefix}.fc1"));
    let h = g.gelu(h);
    linear(g, pv, h, &format!("{prefix}.fc2"))
}

pub fn init_transformer_block(
    params: &mut Params,
    prefix: &str,
    dim: usize,
    with_ff: bool,
    rng: &mut impl Rng,
) {
    init_layer_norm(params, &format!("{prefix}.ln1"), dim);
    init_attention(params, &format!("{prefix}.attn"), dim, rng);
    if with_ff {
        init_layer_norm(params, &format!("{prefix}.ln2"), dim);
        init_mlp(params, &format!("{prefix}.mlp"), dim, rng);
    }
}

/// Pre-LN residual block: x + attn(ln(x)) [+ mlp(ln(x))].
pub fn transformer_block(
    g: &mut Graph,
    pv: &ParamView,
    x: NodeId,
    prefix: &str,
    heads: usize,
    causal: bool,
    with_ff: bool,
) -> NodeId {
    let n1 = layer_norm(g, pv, x, &format!("{prefix}.ln1"));
    let a = attention(g, pv, n1, &format!("{prefix}.attn"), heads, causal);
    let x = g.add(x, a);
    if !with_ff {
        return x;
    }
    let n2 = layer_norm(g, pv, x, &format!("{prefix}.ln2"));
    let m = mlp(g, pv, n2, &format!("{prefix}.mlp"));
    g.add(x, m)
}

pub fn init_transformer_stack(
    params: &mut Params,
    prefix: &str,
    layers: usize,
    dim: usize,
    rng: &mut impl Rng,
) {
    for i in 0..layers {
        init_transformer_block(params, &format!("{prefix}.blk{i}"), dim, true, rng);
    }
    init_layer_norm(params, &format!("{prefix}.lnf"), dim);
}

/// Stack of blocks followed by a final layer norm.
pub fn transformer_stack(
    g: &mut Graph,
    pv: &ParamView,
    mut x: NodeId,
    prefix: &str,
    layers: usize,
    heads: usize,
    causal: bool,
) -> NodeId {
    for i in 0..layers {
        x = transformer_block(g, pv, x, &format!("{prefix}.blk{i}"), heads, causal, true);
    }
    layer_norm(g, pv, x, &format!("{prefix}.lnf"))
}

/// Fixed sinusoidal table, [len, dim].
pub fn sinusoidal_table(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = (pos as f64 * rate).sin();
            data[pos * dim + 2 * i + 1] = (pos as f64 * rate).cos();
        }
    }
    Tensor::matrix(len, dim, data)
}

/// Sinusoidal embedding of a single (possibly fractional) position, [1, dim].
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Tensor {
    let mut data = vec![0.0; dim];
    for i in 0..dim / 2 {
        let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        data[2 * i] = (pos * rate).sin();
        data[2 * i + 1] = (pos * rate).cos();
    }
    Tensor::matrix(1, dim, data)
}

/// L2-normalize a row vector node to unit norm.
pub fn l2_normalize(g: &mut Graph, x: NodeId) -> NodeId {
    let sq = g.mul(x, x);
    let n2 = g.sum_all(sq);
    let n2e = g.add_const(n2, 1e-12);
    let inv = g.rsqrt(n2e);
    g.mul_scalar_node(x, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn causal_stack_is_suffix_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dim = 16;
        let mut params = Params::new();
        init_transformer_stack(&mut params, "m", 2, dim, &mut rng);

        let full: Vec<f64> = (0..6 * dim).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let run = |rows: usize| -> Vec<f64> {
            let mut g = Graph::new();
            let pv = ParamView::trainable(&params);
            let x = g.constant(Tensor::matrix(rows, dim, full[..rows * dim].to_vec()));
            let y = transformer_stack(&mut g, &pv, x, "m", 2, 4, true);
            g.value(y).data.clone()
        };
        let y_full = run(6);
        let y_pre = run(4);
        // first 4 rows identical bit for bit
        assert_eq!(&y_full[..4 * dim], &y_pre[..]);
    }

    #[test]
    fn bidirectional_stack_is_not_suffix_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dim = 8;
        let mut params = Params::new();
        init_transformer_stack(&mut params, "m", 1, dim, &mut rng);
        let full: Vec<f64> = (0..4 * dim).map(|i| (i as f64 * 0.3).sin()).collect();
        let run = |rows: usize| -> Vec<f64> {
            let mut g = Graph::new();
            let pv = ParamView::trainable(&params);
            let x = g.constant(Tensor::matrix(rows, dim, full[..rows * dim].to_vec()));
            let y = transformer_stack(&mut g, &pv, x, "m", 1, 2, false);
            g.value(y).data.clone()
        };
        let y_full = run(4);
        let y_pre = run(2);
        assert_ne!(&y_full[..2 * dim], &y_pre[..]);
    }

    #[test]
    fn l2_normalize_gives_unit_norm() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![3.0, -4.0, 1.0, 2.0]));
        let y = l2_normalize(&mut g, x);
        let norm: f64 = g.value(y).data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn transformer_block_grad_check_at_toy_dims() {
        use crate::numerics::grad_check;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let dim = 6;
        let mut params = Params::new();
        init_transformer_block(&mut params, "b", dim, true, &mut rng);
        let x = Tensor::matrix(3, dim, (0..18).map(|i| (i as f64 * 0.27).sin()).collect());
        let report = grad_check(
            &[x],
            |g, ids| {
                let pv = ParamView::trainable(&params);
                let y = transformer_block(g, &pv, ids[0], "b", 2, true, true);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_rel_err);
    }
}
