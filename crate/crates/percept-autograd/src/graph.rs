//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] is an append-only tape of operations evaluated eagerly.
//! Because nodes are appended after their parents, insertion order is a
//! topological order and backpropagation is a single reverse sweep.
//!
//! Numerical conventions that matter for reproducibility:
//! - every reduction uses fixed in-order summation (no reassociation), so
//!   forward and backward are bit-identical across runs;
//! - masked attention uses exact `-inf` logits: `exp(-inf)` contributes an
//!   exact `0.0`, so masked positions can never leak into a weighted sum.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use std::collections::HashMap;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Min2(NodeId, NodeId),
    Max2(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ScaleBy(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Recip(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddRowBroadcast(NodeId, NodeId),
    MulColBroadcast(NodeId, NodeId),
    RepeatRows(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    L2NormalizeRows { x: NodeId, eps: f64 },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
    BceLogits { logits: NodeId, targets: Tensor },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    GatherRows { x: NodeId, idx: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    Reshape(NodeId),
    BilinearSample { feats: NodeId, h: usize, w: usize, pos: NodeId },
    MixK { inputs: Vec<NodeId>, weights: NodeId },
    Im2Col { x: NodeId, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Eagerly evaluated autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    param_nodes: HashMap<ParamId, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to `id`, if any.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    // ---- leaves ------------------------------------------------------

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Brings a parameter into the graph. Memoized: the same parameter maps
    /// to the same node within one graph, so its gradient accumulates.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return NodeId(n);
        }
        let n = self.push(Op::Param, store.get(id).clone(), true);
        self.param_nodes.insert(id, n.0);
        n
    }

    /// Cuts the tape: same value, no gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.clone();
        self.constant(v)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    /// Elementwise minimum; ties send the gradient to the first argument.
    pub fn min2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, f64::min);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Min2(a, b), v, ng)
    }

    pub fn max2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, f64::max);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Max2(a, b), v, ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x * s);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), v, ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x + s);
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), v, ng)
    }

    /// `a * s` where `s` is a differentiable `[1, 1]` scalar node.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.nodes[s.0].value.item();
        let v = self.nodes[a.0].value.map(|x| x * sv);
        let ng = self.needs(a) || self.needs(s);
        self.push(Op::ScaleBy(a, s), v, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), v, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::tanh);
        let ng = self.needs(a);
        self.push(Op::Tanh(a), v, ng)
    }

    /// GELU with the tanh approximation; smooth everywhere, which keeps
    /// finite-difference gradient checks clean.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .nodes[a.0]
            .value
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let ng = self.needs(a);
        self.push(Op::Gelu(a), v, ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::exp);
        let ng = self.needs(a);
        self.push(Op::Exp(a), v, ng)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::ln);
        let ng = self.needs(a);
        self.push(Op::Ln(a), v, ng)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| 1.0 / x);
        let ng = self.needs(a);
        self.push(Op::Recip(a), v, ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::abs);
        let ng = self.needs(a);
        self.push(Op::Abs(a), v, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(Op::Relu(a), v, ng)
    }

    /// Elementwise `a / b` as `a * recip(b)`.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let r = self.recip(b);
        self.mul(a, r)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.transpose();
        let ng = self.needs(a);
        self.push(Op::Transpose(a), v, ng)
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row_broadcast(xw, b)
    }

    /// `a [n,m] + v [1,m]`, broadcasting `v` to every row.
    pub fn add_row_broadcast(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (n, m) = self.nodes[a.0].value.shape();
        assert_eq!(self.nodes[v.0].value.shape(), (1, m), "row broadcast expects [1,{m}]");
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                out.set(i, j, self.nodes[a.0].value.get(i, j) + self.nodes[v.0].value.get(0, j));
            }
        }
        let ng = self.needs(a) || self.needs(v);
        self.push(Op::AddRowBroadcast(a, v), out, ng)
    }

    /// `a [n,m] * v [n,1]`, broadcasting `v` across each row.
    pub fn mul_col_broadcast(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (n, m) = self.nodes[a.0].value.shape();
        assert_eq!(self.nodes[v.0].value.shape(), (n, 1), "col broadcast expects [{n},1]");
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let s = self.nodes[v.0].value.get(i, 0);
            for j in 0..m {
                out.set(i, j, self.nodes[a.0].value.get(i, j) * s);
            }
        }
        let ng = self.needs(a) || self.needs(v);
        self.push(Op::MulColBroadcast(a, v), out, ng)
    }

    /// Tiles a `[1, m]` row `n` times.
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let (r, m) = self.nodes[a.0].value.shape();
        assert_eq!(r, 1, "repeat_rows expects a [1,m] input");
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(self.nodes[a.0].value.row(0));
        }
        let ng = self.needs(a);
        self.push(Op::RepeatRows(a), out, ng)
    }

    // ---- normalization and losses --------------------------------------

    /// Row-wise softmax. Rows may contain exact `-inf` entries (masked
    /// positions); they get exact zero probability. Each row must keep at
    /// least one finite entry.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let (n, m) = x.shape();
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row = x.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(mx.is_finite(), "softmax row {i} is fully masked");
            let mut denom = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out.set(i, j, e);
                denom += e;
            }
            for j in 0..m {
                out.set(i, j, out.get(i, j) / denom);
            }
        }
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), out, ng)
    }

    /// Row-wise layer normalization with learnable gain/bias (`[1, m]`).
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (n, m) = v.shape();
        assert_eq!(self.nodes[gain.0].value.shape(), (1, m));
        assert_eq!(self.nodes[bias.0].value.shape(), (1, m));
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row = v.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..m {
                let xhat = (row[j] - mean) * inv;
                out.set(i, j, xhat * self.nodes[gain.0].value.get(0, j) + self.nodes[bias.0].value.get(0, j));
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNormRows { x, gain, bias, eps }, out, ng)
    }

    /// Rows scaled to unit L2 norm (plus `eps` inside the square root).
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (n, m) = v.shape();
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row = v.row(i);
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
            for j in 0..m {
                out.set(i, j, row[j] / norm);
            }
        }
        let ng = self.needs(x);
        self.push(Op::L2NormalizeRows { x, eps }, out, ng)
    }

    /// Per-row cross entropy against integer targets; output `[n, 1]`.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let x = &self.nodes[logits.0].value;
        let (n, m) = x.shape();
        assert_eq!(targets.len(), n, "one target per row");
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            let row = x.row(i);
            assert!(targets[i] < m, "target {} out of range for {m} classes", targets[i]);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            out.set(i, 0, lse - row[targets[i]]);
        }
        let ng = self.needs(logits);
        self.push(Op::CrossEntropyRows { logits, targets }, out, ng)
    }

    /// Elementwise binary cross entropy on logits against fixed targets in
    /// `[0, 1]`; numerically stable log1p form.
    pub fn bce_logits(&mut self, logits: NodeId, targets: Tensor) -> NodeId {
        let x = &self.nodes[logits.0].value;
        assert_eq!(x.shape(), targets.shape(), "BCE target shape mismatch");
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let v = x.data()[i];
            let z = targets.data()[i];
            out.data_mut()[i] = v.max(0.0) - v * z + (-v.abs()).exp().ln_1p();
        }
        let ng = self.needs(logits);
        self.push(Op::BceLogits { logits, targets }, out, ng)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        let ng = self.needs(a);
        self.push(Op::SumAll(a), v, ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), v, ng)
    }

    /// Per-row sums: `[n, m] -> [n, 1]`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let mut v = Tensor::zeros(t.rows(), 1);
        for i in 0..t.rows() {
            v.set(i, 0, t.row(i).iter().sum());
        }
        let ng = self.needs(a);
        self.push(Op::SumRows(a), v, ng)
    }

    /// Column sums: `[n, m] -> [1, m]`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let mut v = Tensor::zeros(1, t.cols());
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                v.add_at(0, j, t.get(i, j));
            }
        }
        let ng = self.needs(a);
        self.push(Op::SumCols(a), v, ng)
    }

    // ---- indexing and assembly ------------------------------------------

    /// Row gather; duplicate indices are allowed and their gradients add.
    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let t = &self.nodes[x.0].value;
        let mut v = Tensor::zeros(idx.len(), t.cols());
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < t.rows(), "gather index {i} out of {} rows", t.rows());
            v.row_mut(k).copy_from_slice(t.row(i));
        }
        let ng = self.needs(x);
        self.push(Op::GatherRows { x, idx }, v, ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.rows()).sum();
        let mut v = Tensor::zeros(total, cols);
        let mut r = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            for i in 0..t.rows() {
                v.row_mut(r).copy_from_slice(t.row(i));
                r += 1;
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Op::ConcatRows(parts.to_vec()), v, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut v = Tensor::zeros(rows, total);
        let mut base = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                for j in 0..t.cols() {
                    v.set(i, base + j, t.get(i, j));
                }
            }
            base += t.cols();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Op::ConcatCols(parts.to_vec()), v, ng)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let t = &self.nodes[x.0].value;
        assert!(start + len <= t.rows(), "row slice out of bounds");
        let mut v = Tensor::zeros(len, t.cols());
        for i in 0..len {
            v.row_mut(i).copy_from_slice(t.row(start + i));
        }
        let ng = self.needs(x);
        self.push(Op::SliceRows { x, start, len }, v, ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let t = &self.nodes[x.0].value;
        assert!(start + len <= t.cols(), "col slice out of bounds");
        let mut v = Tensor::zeros(t.rows(), len);
        for i in 0..t.rows() {
            for j in 0..len {
                v.set(i, j, t.get(i, start + j));
            }
        }
        let ng = self.needs(x);
        self.push(Op::SliceCols { x, start, len }, v, ng)
    }

    /// Same data, new shape (row-major order preserved).
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let t = &self.nodes[x.0].value;
        assert_eq!(t.len(), rows * cols, "reshape must preserve element count");
        let v = Tensor::from_vec(rows, cols, t.data().to_vec());
        let ng = self.needs(x);
        self.push(Op::Reshape(x), v, ng)
    }

    // ---- spatial ---------------------------------------------------------

    /// Bilinear sampling of a feature grid.
    ///
    /// `feats` is `[h*w, c]` (row-major cells), `pos` is `[n, 2]` with
    /// normalized `(x, y)` in `[0, 1]`. Uses half-pixel centers and border
    /// clamping. Differentiable in both the grid and the positions.
    pub fn bilinear_sample(&mut self, feats: NodeId, h: usize, w: usize, pos: NodeId) -> NodeId {
        let f = &self.nodes[feats.0].value;
        let p = &self.nodes[pos.0].value;
        assert_eq!(f.rows(), h * w, "feature rows must equal h*w");
        assert_eq!(p.cols(), 2, "positions must be [n,2]");
        let c = f.cols();
        let n = p.rows();
        let mut out = Tensor::zeros(n, c);
        for i in 0..n {
            let (x0i, x1i, fx) = sample_axis(p.get(i, 0), w);
            let (y0i, y1i, fy) = sample_axis(p.get(i, 1), h);
            for ch in 0..c {
                let v00 = f.get(y0i * w + x0i, ch);
                let v01 = f.get(y0i * w + x1i, ch);
                let v10 = f.get(y1i * w + x0i, ch);
                let v11 = f.get(y1i * w + x1i, ch);
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out.set(i, ch, top * (1.0 - fy) + bot * fy);
            }
        }
        let ng = self.needs(feats) || self.needs(pos);
        self.push(Op::BilinearSample { feats, h, w, pos }, out, ng)
    }

    /// Weighted combination of `K` stacked inputs:
    /// `out[i, :] = sum_k weights[i, k] * inputs[k][i, :]`.
    pub fn mix_k(&mut self, inputs: &[NodeId], weights: NodeId) -> NodeId {
        assert!(!inputs.is_empty());
        let (n, d) = self.nodes[inputs[0].0].value.shape();
        let wt = &self.nodes[weights.0].value;
        assert_eq!(wt.shape(), (n, inputs.len()), "weights must be [n, K]");
        let mut out = Tensor::zeros(n, d);
        for (k, inp) in inputs.iter().enumerate() {
            let t = &self.nodes[inp.0].value;
            assert_eq!(t.shape(), (n, d), "mix_k input shape mismatch");
            for i in 0..n {
                let w = wt.get(i, k);
                let row = t.row(i);
                let orow = out.row_mut(i);
                for j in 0..d {
                    orow[j] += w * row[j];
                }
            }
        }
        let ng = inputs.iter().any(|p| self.needs(*p)) || self.needs(weights);
        self.push(Op::MixK { inputs: inputs.to_vec(), weights }, out, ng)
    }

    /// Unfolds `kh x kw` patches of a `[h*w, c]` grid (zero padding) into
    /// rows of `[oh*ow, kh*kw*c]`, so a convolution becomes one matmul.
    pub fn im2col(
        &mut self,
        x: NodeId,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let t = &self.nodes[x.0].value;
        let c = t.cols();
        assert_eq!(t.rows(), h * w, "input rows must equal h*w");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(oh * ow, kh * kw * c);
        for or in 0..oh {
            for oc in 0..ow {
                let orow = or * ow + oc;
                for ky in 0..kh {
                    let iy = (or * stride + ky) as isize - pad as isize;
                    for kx in 0..kw {
                        let ix = (oc * stride + kx) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                            continue; // zero padding
                        }
                        let irow = iy as usize * w + ix as usize;
                        let base = (ky * kw + kx) * c;
                        for ch in 0..c {
                            out.set(orow, base + ch, t.get(irow, ch));
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(Op::Im2Col { x, h, w, kh, kw, stride, pad }, out, ng)
    }

    // ---- backward ---------------------------------------------------------

    fn accum(&mut self, target: NodeId, delta: Tensor) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Gradient of a parameter node created by [`Graph::param`], if the
    /// parameter participated in the last backward pass.
    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.param_nodes.get(&id).and_then(|&n| self.grads.get(n).and_then(Option::as_ref))
    }

    /// Collects per-parameter gradients indexed by [`ParamId`] position.
    pub fn collect_param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        (0..store.len()).map(|i| self.param_grad(ParamId(i)).cloned()).collect()
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.nodes[root.0].value.shape(), (1, 1), "backward needs a scalar root");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &g);
            self.grads[i] = Some(g);
        }
    }

    fn backward_op(&mut self, node: usize, op: &Op, g: &Tensor) {
        match op {
            Op::Const | Op::Param => {}
            Op::Add(a, b) => {
                self.accum(*a, g.clone());
                self.accum(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(*a, g.clone());
                self.accum(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(&self.nodes[b.0].value, |g, b| g * b);
                let db = g.zip_map(&self.nodes[a.0].value, |g, a| g * a);
                self.accum(*a, da);
                self.accum(*b, db);
            }
            Op::Min2(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&g, (&x, &y))| if x <= y { g } else { 0.0 })
                        .collect(),
                );
                let db = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&g, (&x, &y))| if y < x { g } else { 0.0 })
                        .collect(),
                );
                self.accum(*a, da);
                self.accum(*b, db);
            }
            Op::Max2(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&g, (&x, &y))| if x >= y { g } else { 0.0 })
                        .collect(),
                );
                let db = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&g, (&x, &y))| if y > x { g } else { 0.0 })
                        .collect(),
                );
                self.accum(*a, da);
                self.accum(*b, db);
            }
            Op::Scale(a, s) => self.accum(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accum(*a, g.clone()),
            Op::ScaleBy(a, s) => {
                let sv = self.nodes[s.0].value.item();
                let da = g.map(|x| x * sv);
                let ds = g
                    .data()
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&g, &a)| g * a)
                    .sum::<f64>();
                self.accum(*a, da);
                self.accum(*s, Tensor::scalar(ds));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[node].value;
                let da = g.zip_map(y, |g, y| g * y * (1.0 - y));
                self.accum(*a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[node].value;
                let da = g.zip_map(y, |g, y| g * (1.0 - y * y));
                self.accum(*a, da);
            }
            Op::Gelu(a) => {
                let x = &self.nodes[a.0].value;
                let da = g.zip_map(x, |g, x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                self.accum(*a, da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[node].value;
                self.accum(*a, g.zip_map(y, |g, y| g * y));
            }
            Op::Ln(a) => {
                let x = &self.nodes[a.0].value;
                self.accum(*a, g.zip_map(x, |g, x| g / x));
            }
            Op::Recip(a) => {
                let y = &self.nodes[node].value;
                self.accum(*a, g.zip_map(y, |g, y| -g * y * y));
            }
            Op::Abs(a) => {
                let x = &self.nodes[a.0].value;
                self.accum(*a, g.zip_map(x, |g, x| g * x.signum() * if x == 0.0 { 0.0 } else { 1.0 }));
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                self.accum(*a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::MatMul(a, b) => {
                let bt = self.nodes[b.0].value.transpose();
                let at = self.nodes[a.0].value.transpose();
                self.accum(*a, g.matmul(&bt));
                self.accum(*b, at.matmul(g));
            }
            Op::Transpose(a) => self.accum(*a, g.transpose()),
            Op::AddRowBroadcast(a, v) => {
                self.accum(*a, g.clone());
                let mut dv = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        dv.add_at(0, j, g.get(i, j));
                    }
                }
                self.accum(*v, dv);
            }
            Op::MulColBroadcast(a, v) => {
                let va = &self.nodes[a.0].value;
                let vv = &self.nodes[v.0].value;
                let mut da = Tensor::zeros(g.rows(), g.cols());
                let mut dv = Tensor::zeros(g.rows(), 1);
                for i in 0..g.rows() {
                    let s = vv.get(i, 0);
                    let mut acc = 0.0;
                    for j in 0..g.cols() {
                        da.set(i, j, g.get(i, j) * s);
                        acc += g.get(i, j) * va.get(i, j);
                    }
                    dv.set(i, 0, acc);
                }
                self.accum(*a, da);
                self.accum(*v, dv);
            }
            Op::RepeatRows(a) => {
                let mut dv = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        dv.add_at(0, j, g.get(i, j));
                    }
                }
                self.accum(*a, dv);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[node].value;
                let (n, m) = y.shape();
                let mut dx = Tensor::zeros(n, m);
                for i in 0..n {
                    let dot: f64 = (0..m).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..m {
                        dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.accum(*a, dx);
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let v = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let (n, m) = v.shape();
                let mut dx = Tensor::zeros(n, m);
                let mut dgain = Tensor::zeros(1, m);
                let mut dbias = Tensor::zeros(1, m);
                for i in 0..n {
                    let row = v.row(i);
                    let mean = row.iter().sum::<f64>() / m as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&x| (x - mean) * inv).collect();
                    let dyhat: Vec<f64> = (0..m).map(|j| g.get(i, j) * gv.get(0, j)).collect();
                    let mean_dy = dyhat.iter().sum::<f64>() / m as f64;
                    let mean_dyx = dyhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for j in 0..m {
                        dgain.add_at(0, j, g.get(i, j) * xhat[j]);
                        dbias.add_at(0, j, g.get(i, j));
                        dx.set(i, j, inv * (dyhat[j] - mean_dy - xhat[j] * mean_dyx));
                    }
                }
                self.accum(*x, dx);
                self.accum(*gain, dgain);
                self.accum(*bias, dbias);
            }
            Op::L2NormalizeRows { x, eps } => {
                let v = &self.nodes[x.0].value;
                let (n, m) = v.shape();
                let mut dx = Tensor::zeros(n, m);
                for i in 0..n {
                    let row = v.row(i);
                    let norm = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
                    let dot: f64 = (0..m).map(|j| g.get(i, j) * row[j]).sum();
                    for j in 0..m {
                        dx.set(i, j, g.get(i, j) / norm - row[j] * dot / (norm * norm * norm));
                    }
                }
                self.accum(*x, dx);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let x = &self.nodes[logits.0].value;
                let (n, m) = x.shape();
                let mut dx = Tensor::zeros(n, m);
                for i in 0..n {
                    let row = x.row(i);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                    let gi = g.get(i, 0);
                    for j in 0..m {
                        let p = (row[j] - mx).exp() / denom;
                        let t = if j == targets[i] { 1.0 } else { 0.0 };
                        dx.set(i, j, gi * (p - t));
                    }
                }
                self.accum(*logits, dx);
            }
            Op::BceLogits { logits, targets } => {
                let x = &self.nodes[logits.0].value;
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.len() {
                    let sig = 1.0 / (1.0 + (-x.data()[i]).exp());
                    dx.data_mut()[i] = g.data()[i] * (sig - targets.data()[i]);
                }
                self.accum(*logits, dx);
            }
            Op::SumAll(a) => {
                let t = &self.nodes[a.0].value;
                self.accum(*a, Tensor::full(t.rows(), t.cols(), g.item()));
            }
            Op::MeanAll(a) => {
                let t = &self.nodes[a.0].value;
                self.accum(*a, Tensor::full(t.rows(), t.cols(), g.item() / t.len() as f64));
            }
            Op::SumRows(a) => {
                let t = &self.nodes[a.0].value;
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for i in 0..t.rows() {
                    let gi = g.get(i, 0);
                    for j in 0..t.cols() {
                        dx.set(i, j, gi);
                    }
                }
                self.accum(*a, dx);
            }
            Op::SumCols(a) => {
                let t = &self.nodes[a.0].value;
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for i in 0..t.rows() {
                    for j in 0..t.cols() {
                        dx.set(i, j, g.get(0, j));
                    }
                }
                self.accum(*a, dx);
            }
            Op::GatherRows { x, idx } => {
                let t = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..t.cols() {
                        dx.add_at(i, j, g.get(k, j));
                    }
                }
                self.accum(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for p in parts {
                    let rows = self.nodes[p.0].value.rows();
                    let mut dp = Tensor::zeros(rows, g.cols());
                    for i in 0..rows {
                        dp.row_mut(i).copy_from_slice(g.row(r + i));
                    }
                    r += rows;
                    self.accum(*p, dp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut base = 0;
                for p in parts {
                    let cols = self.nodes[p.0].value.cols();
                    let mut dp = Tensor::zeros(g.rows(), cols);
                    for i in 0..g.rows() {
                        for j in 0..cols {
                            dp.set(i, j, g.get(i, base + j));
                        }
                    }
                    base += cols;
                    self.accum(*p, dp);
                }
            }
            Op::SliceRows { x, start, len } => {
                let t = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for i in 0..*len {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accum(*x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let t = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for i in 0..t.rows() {
                    for j in 0..*len {
                        dx.set(i, start + j, g.get(i, j));
                    }
                }
                self.accum(*x, dx);
            }
            Op::Reshape(x) => {
                let t = &self.nodes[x.0].value;
                self.accum(*x, Tensor::from_vec(t.rows(), t.cols(), g.data().to_vec()));
            }
            Op::BilinearSample { feats, h, w, pos } => {
                let f = &self.nodes[feats.0].value;
                let p = &self.nodes[pos.0].value;
                let c = f.cols();
                let n = p.rows();
                let mut dfeats = Tensor::zeros(f.rows(), c);
                let mut dpos = Tensor::zeros(n, 2);
                for i in 0..n {
                    let (x0i, x1i, fx) = sample_axis(p.get(i, 0), *w);
                    let (y0i, y1i, fy) = sample_axis(p.get(i, 1), *h);
                    let mut dpx = 0.0;
                    let mut dpy = 0.0;
                    for ch in 0..c {
                        let gi = g.get(i, ch);
                        let v00 = f.get(y0i * w + x0i, ch);
                        let v01 = f.get(y0i * w + x1i, ch);
                        let v10 = f.get(y1i * w + x0i, ch);
                        let v11 = f.get(y1i * w + x1i, ch);
                        dfeats.add_at(y0i * w + x0i, ch, gi * (1.0 - fy) * (1.0 - fx));
                        dfeats.add_at(y0i * w + x1i, ch, gi * (1.0 - fy) * fx);
                        dfeats.add_at(y1i * w + x0i, ch, gi * fy * (1.0 - fx));
                        dfeats.add_at(y1i * w + x1i, ch, gi * fy * fx);
                        dpx += gi * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        dpy += gi * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                    // d(pixel coord)/d(normalized coord) = grid extent.
                    dpos.set(i, 0, dpx * *w as f64);
                    dpos.set(i, 1, dpy * *h as f64);
                }
                self.accum(*feats, dfeats);
                self.accum(*pos, dpos);
            }
            Op::MixK { inputs, weights } => {
                let (n, d) = g.shape();
                let mut dw = Tensor::zeros(n, inputs.len());
                for (k, inp) in inputs.iter().enumerate() {
                    let mut dinp = Tensor::zeros(n, d);
                    {
                        let wt = &self.nodes[weights.0].value;
                        let t = &self.nodes[inp.0].value;
                        for i in 0..n {
                            let wv = wt.get(i, k);
                            let mut acc = 0.0;
                            for j in 0..d {
                                dinp.set(i, j, g.get(i, j) * wv);
                                acc += g.get(i, j) * t.get(i, j);
                            }
                            dw.set(i, k, acc);
                        }
                    }
                    self.accum(*inp, dinp);
                }
                self.accum(*weights, dw);
            }
            Op::Im2Col { x, h, w, kh, kw, stride, pad } => {
                let t = &self.nodes[x.0].value;
                let c = t.cols();
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w + 2 * pad - kw) / stride + 1;
                let mut dx = Tensor::zeros(t.rows(), c);
                for or in 0..oh {
                    for oc in 0..ow {
                        let orow = or * ow + oc;
                        for ky in 0..*kh {
                            let iy = (or * stride + ky) as isize - *pad as isize;
                            for kx in 0..*kw {
                                let ix = (oc * stride + kx) as isize - *pad as isize;
                                if iy < 0 || iy >= *h as isize || ix < 0 || ix >= *w as isize {
                                    continue;
                                }
                                let irow = iy as usize * w + ix as usize;
                                let base = (ky * kw + kx) * c;
                                for ch in 0..c {
                                    dx.add_at(irow, ch, g.get(orow, base + ch));
                                }
                            }
                        }
                    }
                }
                self.accum(*x, dx);
            }
        }
    }
}

/// Maps a normalized coordinate to bracketing cell indices and the
/// interpolation fraction (half-pixel centers, border clamp).
fn sample_axis(norm: f64, extent: usize) -> (usize, usize, f64) {
    let p = norm * extent as f64 - 0.5;
    let p0 = p.floor();
    let frac = p - p0;
    let i0 = (p0 as isize).clamp(0, extent as isize - 1) as usize;
    let i1 = (p0 as isize + 1).clamp(0, extent as isize - 1) as usize;
    (i0, i1, frac)
}
