//! Reverse-mode automatic differentiation on a Wengert list. Ops push nodes
//! holding forward values; `backward` walks the list in reverse and
//! accumulates gradients. Values are immutable once created; a graph is built
//! and differentiated on a single thread, while parameter containers can be
//! shared read-only across threads for batch- or candidate-level parallelism.

use crate::error::{Error, Result};
use crate::numerics::kernels;

pub type NodeId = usize;
pub type ParamId = usize;

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols interpretation: a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a[r,c] + b[c], broadcast over rows
    AddBias(NodeId, NodeId),
    /// a[c,t] + b[c], broadcast over the time axis
    AddChannel(NodeId, NodeId),
    /// a[c,t] * b[c], broadcast over the time axis
    MulChannel(NodeId, NodeId),
    /// a * s where s is a one-element node
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Silu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Rsqrt(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    GroupNorm {
        x: NodeId,
        groups: usize,
        eps: f64,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    /// [r,c] -> [1,c] mean over rows
    MeanRows(NodeId),
    MaskedCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Per-pass gradient buffers, merged into node grads when the pass finishes.
struct PassGrads {
    bufs: Vec<Option<Vec<f64>>>,
}

impl PassGrads {
    fn accum(&mut self, nodes: &[Node], id: NodeId, delta: &[f64]) {
        if !nodes[id].requires_grad {
            return;
        }
        let n = nodes[id].value.numel();
        let g = self.bufs[id].get_or_insert_with(|| vec![0.0; n]);
        for (gv, dv) in g.iter_mut().zip(delta) {
            *gv += dv;
        }
    }
}

/// Computation graph (tape).
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
            param: None,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id].value.numel(), 1, "node is not scalar");
        self.nodes[id].value.data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn param_of(&self, id: NodeId) -> Option<ParamId> {
        self.nodes[id].param
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, t, requires_grad)
    }

    /// Differentiable leaf tagged with a parameter id for gradient export.
    pub fn param_leaf(&mut self, pid: ParamId, t: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, t, true);
        self.nodes[id].param = Some(pid);
        id
    }

    /// Copy of a node's value with the gradient path severed.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let t = self.nodes[id].value.clone();
        self.push(Op::Leaf, t, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape, self.nodes[b].value.shape, "add");
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.nodes[a].value.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), t, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape, self.nodes[b].value.shape, "sub");
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.nodes[a].value.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), t, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape, self.nodes[b].value.shape, "mul");
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.nodes[a].value.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), t, rg)
    }

    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        assert_eq!(self.nodes[b].value.numel(), c, "add_bias");
        let mut data = self.nodes[a].value.data.clone();
        let bias = &self.nodes[b].value.data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bias[j];
            }
        }
        let t = Tensor::new(self.nodes[a].value.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::AddBias(a, b), t, rg)
    }

    pub fn add_channel(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (c, tl) = (self.nodes[a].value.shape[0], self.nodes[a].value.shape[1]);
        assert_eq!(self.nodes[b].value.numel(), c, "add_channel");
        let mut data = self.nodes[a].value.data.clone();
        let bias = &self.nodes[b].value.data;
        for ch in 0..c {
            for ti in 0..tl {
                data[ch * tl + ti] += bias[ch];
            }
        }
        let t = Tensor::new(self.nodes[a].value.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::AddChannel(a, b), t, rg)
    }

    pub fn mul_channel(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (c, tl) = (self.nodes[a].value.shape[0], self.nodes[a].value.shape[1]);
        assert_eq!(self.nodes[b].value.numel(), c, "mul_channel");
        let mut data = self.nodes[a].value.data.clone();
        let scale = &self.nodes[b].value.data;
        for ch in 0..c {
            for ti in 0..tl {
                data[ch * tl + ti] *= scale[ch];
            }
        }
        let t = Tensor::new(self.nodes[a].value.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MulChannel(a, b), t, rg)
    }

    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].value.numel(), 1, "mul_scalar_node");
        let sv = self.nodes[s].value.data[0];
        let data = self.nodes[a].value.data.iter().map(|x| x * sv).collect();
        let t = Tensor::new(self.nodes[a].value.shape.clone(), data);
        let rg = self.rg(a) || self.rg(s);
        self.push(Op::MulScalar(a, s), t, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].value.data.iter().map(|x| x * c).collect();
        let t = Tensor::new(self.nodes[a].value.shape.clone(), data);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), t, rg)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].value.data.iter().map(|x| x + c).collect();
        let t = Tensor::new(self.nodes[a].value.shape.clone(), data);
        let rg = self.rg(a);
        self.push(Op::AddConst(a), t, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        let (k2, n) = (self.nodes[b].value.rows(), self.nodes[b].value.cols());
        assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
        let data = kernels::matmul(
            &self.nodes[a].value.data,
            &self.nodes[b].value.data,
            m,
            k,
            n,
        );
        let t = Tensor::matrix(m, n, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), t, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        let src = &self.nodes[a].value.data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, data);
        let rg = self.rg(a);
        self.push(Op::Transpose(a), t, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a].value.numel(),
            "reshape"
        );
        let t = Tensor::new(shape, self.nodes[a].value.data.clone());
        let rg = self.rg(a);
        self.push(Op::Reshape(a), t, rg)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let data = self.nodes[a].value.data.iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.nodes[a].value.shape.clone(), data);
        let rg = self.rg(a);
        self.push(op, t, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Gelu(a), gelu_fwd)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn rsqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Rsqrt(a), |x| 1.0 / x.sqrt())
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        let src = &self.nodes[a].value.data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&src[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(self.nodes[a].value.shape.clone(), data);
        let rg = self.rg(a);
        self.push(Op::Softmax(a), t, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (r, c) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
        assert_eq!(self.nodes[gamma].value.numel(), c, "layer_norm gamma");
        assert_eq!(self.nodes[beta].value.numel(), c, "layer_norm beta");
        let src = &self.nodes[x].value.data;
        let g = &self.nodes[gamma].value.data;
        let b = &self.nodes[beta].value.data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.nodes[x].value.shape.clone(), data);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Op::LayerNorm { x, gamma, beta, eps }, t, rg)
    }

    /// Group normalization over a [channels, time] tensor; no affine part.
    pub fn group_norm(&mut self, x: NodeId, groups: usize, eps: f64) -> NodeId {
        let (c, tl) = (self.nodes[x].value.shape[0], self.nodes[x].value.shape[1]);
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} % {groups}");
        let gs = c / groups;
        let src = &self.nodes[x].value.data;
        let mut data = vec![0.0; c * tl];
        for g in 0..groups {
            let lo = g * gs * tl;
            let hi = (g + 1) * gs * tl;
            let n = (gs * tl) as f64;
            let mean = src[lo..hi].iter().sum::<f64>() / n;
            let var = src[lo..hi].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for i in lo..hi {
                data[i] = (src[i] - mean) * inv;
            }
        }
        let t = Tensor::new(self.nodes[x].value.shape.clone(), data);
        let rg = self.rg(x);
        self.push(Op::GroupNorm { x, groups, eps }, t, rg)
    }

    /// 1-D convolution: x[cin, t], w[cout, cin, k], b[cout] -> [cout, t_out].
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xs = &self.nodes[x].value.shape;
        let ws = &self.nodes[w].value.shape;
        assert_eq!(xs.len(), 2, "conv1d x rank");
        assert_eq!(ws.len(), 3, "conv1d w rank");
        assert_eq!(xs[0], ws[1], "conv1d channels");
        let (cin, t) = (xs[0], xs[1]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(self.nodes[b].value.numel(), cout, "conv1d bias");
        let t_out = kernels::conv1d_out_len(t, k, stride, pad);
        let data = kernels::conv1d(
            &self.nodes[x].value.data,
            &self.nodes[w].value.data,
            &self.nodes[b].value.data,
            cin,
            t,
            cout,
            k,
            stride,
            pad,
        );
        let tt = Tensor::matrix(cout, t_out, data);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Conv1d { x, w, b, stride, pad }, tt, rg)
    }

    /// Repeat each time step `factor` times: [c, t] -> [c, t*factor].
    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        let (c, tl) = (self.nodes[x].value.shape[0], self.nodes[x].value.shape[1]);
        let src = &self.nodes[x].value.data;
        let mut data = vec![0.0; c * tl * factor];
        for ch in 0..c {
            for ti in 0..tl {
                let v = src[ch * tl + ti];
                for u in 0..factor {
                    data[ch * tl * factor + ti * factor + u] = v;
                }
            }
        }
        let t = Tensor::matrix(c, tl * factor, data);
        let rg = self.rg(x);
        self.push(Op::Upsample { x, factor }, t, rg)
    }

    /// Gather rows of an embedding table: table[v, d], ids -> [len(ids), d].
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (v, d) = (self.nodes[table].value.rows(), self.nodes[table].value.cols());
        let src = &self.nodes[table].value.data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embed id {} out of range {}", id, v);
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::matrix(ids.len(), d, data);
        let rg = self.rg(table);
        self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            t,
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows empty");
        let c = self.nodes[parts[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.nodes[p].value.cols(), c, "concat_rows cols");
            rows += self.nodes[p].value.rows();
            data.extend_from_slice(&self.nodes[p].value.data);
        }
        let t = Tensor::matrix(rows, c, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), t, rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
        assert!(start + len <= r, "slice_rows {}+{} > {}", start, len, r);
        let data = self.nodes[x].value.data[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data);
        let rg = self.rg(x);
        self.push(Op::SliceRows { x, start, len }, t, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols empty");
        let r = self.nodes[parts[0]].value.rows();
        let total_c: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut data = vec![0.0; r * total_c];
        let mut off = 0;
        for &p in parts {
            let pc = self.nodes[p].value.cols();
            assert_eq!(self.nodes[p].value.rows(), r, "concat_cols rows");
            for i in 0..r {
                data[i * total_c + off..i * total_c + off + pc]
                    .copy_from_slice(&self.nodes[p].value.data[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let t = Tensor::matrix(r, total_c, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), t, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
        assert!(start + len <= c, "slice_cols");
        let src = &self.nodes[x].value.data;
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::matrix(r, len, data);
        let rg = self.rg(x);
        self.push(Op::SliceCols { x, start, len }, t, rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.numel() as f64;
        let s: f64 = self.nodes[a].value.data.iter().sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(Op::MeanAll(a), Tensor::scalar(s), rg)
    }

    /// Mean over rows: [r, c] -> [1, c].
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        let src = &self.nodes[a].value.data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        let rg = self.rg(a);
        self.push(Op::MeanRows(a), Tensor::matrix(1, c, data), rg)
    }

    /// Cross entropy with next-token targets, averaged over unmasked rows.
    /// A fully masked input yields loss 0 with zero gradients.
    pub fn masked_cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> NodeId {
        let (r, c) = (self.nodes[logits].value.rows(), self.nodes[logits].value.cols());
        assert_eq!(targets.len(), r, "masked_cross_entropy targets");
        assert_eq!(mask.len(), r, "masked_cross_entropy mask");
        let src = &self.nodes[logits].value.data;
        let mut total = 0.0;
        let mut n_active = 0usize;
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            assert!(targets[i] < c, "target id out of range");
            let row = &src[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[targets[i]];
            n_active += 1;
        }
        let loss = if n_active == 0 { 0.0 } else { total / n_active as f64 };
        let rg = self.rg(logits);
        self.push(
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse pass from a scalar loss. Each call runs on fresh buffers and
    /// adds its result into the persistent per-node grads, so repeated calls
    /// (same or different losses) accumulate without cross-talk.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape
            )));
        }
        if !self.nodes[loss].value.data[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut pass = PassGrads {
            bufs: vec![None; loss + 1],
        };
        pass.accum(&self.nodes, loss, &[1.0]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad || pass.bufs[id].is_none() {
                continue;
            }
            let g = pass.bufs[id].take().unwrap();
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at node {id}")));
            }
            self.backprop_node(id, &g, &mut pass);
            pass.bufs[id] = Some(g);
        }
        for (id, buf) in pass.bufs.into_iter().enumerate() {
            if let Some(b) = buf {
                let n = self.nodes[id].value.numel();
                let dst = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; n]);
                for (d, s) in dst.iter_mut().zip(&b) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: NodeId, g: &[f64], pass: &mut PassGrads) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                pass.accum(&self.nodes, a, g);
                pass.accum(&self.nodes, b, g);
            }
            Op::Sub(a, b) => {
                pass.accum(&self.nodes, a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                pass.accum(&self.nodes, b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[b].value.data)
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a].value.data)
                    .map(|(gv, av)| gv * av)
                    .collect();
                pass.accum(&self.nodes, a, &da);
                pass.accum(&self.nodes, b, &db);
            }
            Op::AddBias(a, b) => {
                pass.accum(&self.nodes, a, g);
                let c = self.nodes[b].value.numel();
                let r = g.len() / c;
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                pass.accum(&self.nodes, b, &db);
            }
            Op::AddChannel(a, b) => {
                pass.accum(&self.nodes, a, g);
                let c = self.nodes[b].value.numel();
                let tl = g.len() / c;
                let mut db = vec![0.0; c];
                for (ch, dbv) in db.iter_mut().enumerate() {
                    *dbv = g[ch * tl..(ch + 1) * tl].iter().sum();
                }
                pass.accum(&self.nodes, b, &db);
            }
            Op::MulChannel(a, b) => {
                let c = self.nodes[b].value.numel();
                let tl = g.len() / c;
                let scale = self.nodes[b].value.data.clone();
                let av = self.nodes[a].value.data.clone();
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    for ti in 0..tl {
                        let idx = ch * tl + ti;
                        da[idx] = g[idx] * scale[ch];
                        db[ch] += g[idx] * av[idx];
                    }
                }
                pass.accum(&self.nodes, a, &da);
                pass.accum(&self.nodes, b, &db);
            }
            Op::MulScalar(a, s) => {
                let sv = self.nodes[s].value.data[0];
                let da: Vec<f64> = g.iter().map(|v| v * sv).collect();
                let ds: f64 = g
                    .iter()
                    .zip(&self.nodes[a].value.data)
                    .map(|(gv, av)| gv * av)
                    .sum();
                pass.accum(&self.nodes, a, &da);
                pass.accum(&self.nodes, s, &[ds]);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                pass.accum(&self.nodes, a, &da);
            }
            Op::AddConst(a) => pass.accum(&self.nodes, a, g),
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.cols();
                // dA = G @ B^T, dB = A^T @ G
                let da = kernels::matmul_nt(g, &self.nodes[b].value.data, m, n, k);
                let db = kernels::matmul_tn(&self.nodes[a].value.data, g, k, m, n);
                pass.accum(&self.nodes, a, &da);
                pass.accum(&self.nodes, b, &db);
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                pass.accum(&self.nodes, a, &da);
            }
            Op::Reshape(a) => pass.accum(&self.nodes, a, g),
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a].value.data)
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                pass.accum(&self.nodes, a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a].value.data)
                    .map(|(gv, x)| gv * gelu_grad(*x))
                    .collect();
                pass.accum(&self.nodes, a, &da);
            }
            Op::Silu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a].value.data)
                    .map(|(gv, x)| {
                        let s = sigmoid(*x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .collect();
                pass.accum(&self.nodes, a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[id].value.data)
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                pass.accum(&self.nodes, a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[id].value.data)
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                pass.accum(&self.nodes, a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[id].value.data)
                    .map(|(gv, y)| gv * y)
                    .collect();
                pass.accum(&self.nodes, a, &da);
            }
            Op::Ln(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a].value.data)
                    .map(|(gv, x)| gv / x)
                    .collect();
                pass.accum(&self.nodes, a, &da);
            }
            Op::Sqrt(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[id].value.data)
                    .map(|(gv, y)| gv * 0.5 / y)
                    .collect();
                pass.accum(&self.nodes, a, &da);
            }
            Op::Rsqrt(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[id].value.data)
                    .map(|(gv, y)| gv * (-0.5 * y * y * y))
                    .collect();
                pass.accum(&self.nodes, a, &da);
            }
            Op::Softmax(a) => {
                let c = self.nodes[id].value.cols();
                let r = self.nodes[id].value.rows();
                let s = &self.nodes[id].value.data;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let srow = &s[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                    for j in 0..c {
                        da[i * c + j] = srow[j] * (grow[j] - dot);
                    }
                }
                pass.accum(&self.nodes, a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                let xv = self.nodes[x].value.data.clone();
                let gv = self.nodes[gamma].value.data.clone();
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(&gv).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                pass.accum(&self.nodes, x, &dx);
                pass.accum(&self.nodes, gamma, &dgamma);
                pass.accum(&self.nodes, beta, &dbeta);
            }
            Op::GroupNorm { x, groups, eps } => {
                let (c, tl) = (self.nodes[x].value.shape[0], self.nodes[x].value.shape[1]);
                let gs = c / groups;
                let xv = self.nodes[x].value.data.clone();
                let mut dx = vec![0.0; c * tl];
                for grp in 0..groups {
                    let lo = grp * gs * tl;
                    let hi = (grp + 1) * gs * tl;
                    let n = (gs * tl) as f64;
                    let mean = xv[lo..hi].iter().sum::<f64>() / n;
                    let var =
                        xv[lo..hi].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xv[lo..hi].iter().map(|v| (v - mean) * inv).collect();
                    let grow = &g[lo..hi];
                    let m1 = grow.iter().sum::<f64>() / n;
                    let m2 = grow.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (idx, off) in (lo..hi).enumerate() {
                        dx[off] = inv * (grow[idx] - m1 - xhat[idx] * m2);
                    }
                }
                pass.accum(&self.nodes, x, &dx);
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let xs = self.nodes[x].value.shape.clone();
                let ws = self.nodes[w].value.shape.clone();
                let (cin, t) = (xs[0], xs[1]);
                let (cout, k) = (ws[0], ws[2]);
                let (dx, dw, db) = kernels::conv1d_backward(
                    g,
                    &self.nodes[x].value.data,
                    &self.nodes[w].value.data,
                    cin,
                    t,
                    cout,
                    k,
                    stride,
                    pad,
                );
                pass.accum(&self.nodes, x, &dx);
                pass.accum(&self.nodes, w, &dw);
                pass.accum(&self.nodes, b, &db);
            }
            Op::Upsample { x, factor } => {
                let (c, tl) = (self.nodes[x].value.shape[0], self.nodes[x].value.shape[1]);
                let mut dx = vec![0.0; c * tl];
                for ch in 0..c {
                    for ti in 0..tl {
                        let mut s = 0.0;
                        for u in 0..factor {
                            s += g[ch * tl * factor + ti * factor + u];
                        }
                        dx[ch * tl + ti] = s;
                    }
                }
                pass.accum(&self.nodes, x, &dx);
            }
            Op::Embed { table, ids } => {
                let d = self.nodes[id].value.cols();
                let v = self.nodes[table].value.rows();
                let mut dt = vec![0.0; v * d];
                for (i, &tok) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[tok * d + j] += g[i * d + j];
                    }
                }
                pass.accum(&self.nodes, table, &dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p].value.numel();
                    let slice = g[off..off + n].to_vec();
                    pass.accum(&self.nodes, p, &slice);
                    off += n;
                }
            }
            Op::SliceRows { x, start, len } => {
                let c = self.nodes[x].value.cols();
                let r = self.nodes[x].value.rows();
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + len) * c].copy_from_slice(g);
                pass.accum(&self.nodes, x, &dx);
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[id].value.rows();
                let total_c = self.nodes[id].value.cols();
                let mut off = 0;
                for p in parts {
                    let pc = self.nodes[p].value.cols();
                    let mut dp = vec![0.0; r * pc];
                    for i in 0..r {
                        dp[i * pc..(i + 1) * pc]
                            .copy_from_slice(&g[i * total_c + off..i * total_c + off + pc]);
                    }
                    pass.accum(&self.nodes, p, &dp);
                    off += pc;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                pass.accum(&self.nodes, x, &dx);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a].value.numel();
                let da = vec![g[0]; n];
                pass.accum(&self.nodes, a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a].value.numel();
                let da = vec![g[0] / n as f64; n];
                pass.accum(&self.nodes, a, &da);
            }
            Op::MeanRows(a) => {
                let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j] / r as f64;
                    }
                }
                pass.accum(&self.nodes, a, &da);
            }
            Op::MaskedCrossEntropy { logits, targets, mask } => {
                let (r, c) = (self.nodes[logits].value.rows(), self.nodes[logits].value.cols());
                let n_active = mask.iter().filter(|m| **m).count();
                if n_active == 0 {
                    return;
                }
                let src = self.nodes[logits].value.data.clone();
                let mut dl = vec![0.0; r * c];
                let scale = g[0] / n_active as f64;
                for i in 0..r {
                    if !mask[i] {
                        continue;
                    }
                    let row = &src[i * c..(i + 1) * c];
                    let mut probs = vec![0.0; c];
                    softmax_row(row, &mut probs);
                    for j in 0..c {
                        let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[i * c + j] = scale * (probs[j] - indicator);
                    }
                }
                pass.accum(&self.nodes, logits, &dl);
            }
        }
    }

    /// Collect accumulated gradients of parameter-tagged leaves as
    /// (param id, gradient) pairs in tape order.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| match (&n.op, n.param, &n.grad) {
                (Op::Leaf, Some(pid), Some(g)) => Some((pid, g.as_slice())),
                _ => None,
            })
            .collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x*x), x = [1,2,3] -> dx = [2,4,6]
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn uniform_softmax_ce_gradient() {
        // logits [0,0], target 0 -> dlogits = [-0.5, 0.5]
        let mut g = Graph::new();
        let l = g.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]), true);
        let loss = g.masked_cross_entropy(l, &[0], &[true]);
        g.backward(loss).unwrap();
        let gl = g.grad(l).unwrap();
        assert!((gl[0] + 0.5).abs() < 1e-12);
        assert!((gl[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_is_contract_violation() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = g.mul(x, x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn detached_graph_yields_zero_grads() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let d = g.detach(x);
        let sq = g.mul(d, d);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn fully_masked_ce_is_zero_with_zero_grads() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::matrix(2, 3, vec![0.1; 6]), true);
        let loss = g.masked_cross_entropy(l, &[0, 1], &[false, false]);
        assert_eq!(g.scalar_value(loss), 0.0);
        g.backward(loss).unwrap();
        assert!(g.grad(l).is_none() || g.grad(l).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn straight_through_add_detach() {
        // q_st = z + detach(q - z): dq_st/dz must be identity
        let mut g = Graph::new();
        let z = g.leaf(Tensor::vector(vec![0.3, 0.7]), true);
        let q = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let diff = g.sub(q, z);
        let diff_d = g.detach(diff);
        let q_st = g.add(z, diff_d);
        assert_eq!(g.value(q_st).data, vec![0.0, 1.0]);
        let sq = g.mul(q_st, q_st);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        // d(sum(q_st^2))/dz = 2*q_st exactly (gradient passes through)
        assert_eq!(g.grad(z).unwrap(), &[0.0, 2.0]);
    }
}
