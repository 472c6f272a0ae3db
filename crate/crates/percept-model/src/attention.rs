//! Shared graph-building blocks: linear layers by parameter name, layer
//! norm, multi-head attention with optional additive masks, feed-forward,
//! and the clamped inverse sigmoid used for box refinement.

use crate::model::Model;
use percept_autograd::{Graph, NodeId, Tensor};

pub const NORM_EPS: f64 = 1e-5;
/// Boxes are clamped to this open interval before the inverse sigmoid.
pub const LOGIT_EPS: f64 = 1e-3;

impl Model {
    /// `x @ W + b` with parameters `{name}.w` / `{name}.b`.
    pub(crate) fn linear_named(&self, g: &mut Graph, x: NodeId, name: &str) -> NodeId {
        let w = g.param(&self.store, self.pid(&format!("{name}.w")));
        let b = g.param(&self.store, self.pid(&format!("{name}.b")));
        g.linear(x, w, b)
    }

    pub(crate) fn norm_named(&self, g: &mut Graph, x: NodeId, name: &str) -> NodeId {
        let gain = g.param(&self.store, self.pid(&format!("{name}.g")));
        let bias = g.param(&self.store, self.pid(&format!("{name}.b")));
        g.layer_norm_rows(x, gain, bias, NORM_EPS)
    }

    /// Two-layer perceptron `{prefix}1` -> gelu -> `{prefix}2`.
    pub(crate) fn mlp2(&self, g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
        let h = self.linear_named(g, x, &format!("{prefix}1"));
        let h = g.gelu(h);
        self.linear_named(g, h, &format!("{prefix}2"))
    }

    /// Multi-head self-attention over rows of `x` using parameters
    /// `{prefix}.wq/.wk/.wv/.wo`; `mask` is added to every head's scores
    /// (0 for allowed, −inf for forbidden).
    pub(crate) fn mha(
        &self,
        g: &mut Graph,
        x: NodeId,
        prefix: &str,
        heads: usize,
        mask: Option<NodeId>,
    ) -> NodeId {
        let q = self.linear_named(g, x, &format!("{prefix}.wq"));
        let k = self.linear_named(g, x, &format!("{prefix}.wk"));
        let v = self.linear_named(g, x, &format!("{prefix}.wv"));
        let d = g.value(q).cols();
        assert_eq!(d % heads, 0, "width must divide into heads");
        let dh = d / heads;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(&outs);
        self.linear_named(g, merged, &format!("{prefix}.wo"))
    }

    /// Pre-norm feed-forward residual block: `x + ff2(gelu(ff1(norm(x))))`.
    pub(crate) fn ffn_block(&self, g: &mut Graph, x: NodeId, norm: &str, ff: &str) -> NodeId {
        let n = self.norm_named(g, x, norm);
        let h = self.linear_named(g, n, &format!("{ff}1"));
        let h = g.gelu(h);
        let h = self.linear_named(g, h, &format!("{ff}2"));
        g.add(x, h)
    }
}

/// Strictly-lower-triangular-allowed causal mask: entry (t, j) is 0 for
/// j ≤ t and −inf for j > t.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(len, len);
    for t in 0..len {
        for j in (t + 1)..len {
            m.set(t, j, f64::NEG_INFINITY);
        }
    }
    m
}

/// `ln(p / (1 - p))` with `p` clamped to `[LOGIT_EPS, 1 - LOGIT_EPS]`.
pub fn inverse_sigmoid(g: &mut Graph, p: NodeId) -> NodeId {
    let (rows, cols) = {
        let t = g.value(p);
        (t.rows(), t.cols())
    };
    let lo = g.constant(Tensor::full(rows, cols, LOGIT_EPS));
    let hi = g.constant(Tensor::full(rows, cols, 1.0 - LOGIT_EPS));
    let clamped = g.max2(p, lo);
    let clamped = g.min2(clamped, hi);
    let ln_p = g.ln(clamped);
    let neg = g.scale(clamped, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let ln_q = g.ln(one_minus);
    g.sub(ln_p, ln_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use percept_autograd::Graph;

    #[test]
    fn inverse_sigmoid_round_trips() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::row_vec(vec![0.1, 0.5, 0.9, 0.25]));
        let logit = inverse_sigmoid(&mut g, p);
        let back = g.sigmoid(logit);
        for (a, b) in g.value(back).data().iter().zip([0.1, 0.5, 0.9, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_sigmoid_clamps_the_boundary() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::row_vec(vec![0.0, 1.0]));
        let logit = inverse_sigmoid(&mut g, p);
        assert!(g.value(logit).all_finite());
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask(3);
        assert_eq!(m.get(0, 1), f64::NEG_INFINITY);
        assert_eq!(m.get(2, 1), 0.0);
        assert_eq!(m.get(1, 1), 0.0);
    }
}
