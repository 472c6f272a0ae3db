//! Multi-granularity decoder: per layer, every query samples the feature
//! pyramid at learned offsets inside its reference box (deformable
//! cross-attention), exchanges information through masked self-attention,
//! passes a feed-forward block, and refines its reference box. Three heads
//! shared across layers turn the query states into class logits (or match
//! scores), boxes, and mask logits.

use crate::denoising::DenoisingBatch;
use crate::encoder::EncodedImage;
use crate::lm::Granularity;
use crate::model::{Model, ModelError};
use crate::queries::QuerySet;
use crate::attention::inverse_sigmoid;
use percept_autograd::{Graph, NodeId, Tensor};

/// Whether intermediate layers are exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodePhase {
    /// Heads run on every layer; all layers returned for deep supervision.
    Training,
    /// Heads run on the final layer only; exactly one layer returned.
    Inference,
}

/// Head outputs for one decoder layer. Rows cover ordinary queries first,
/// then any denoising queries.
pub struct LayerPrediction {
    /// Word-based: `[T, M+1]` (per-label logits + no-object column).
    /// Sentence-based: `[T, 1]` match scores.
    pub class_logits: NodeId,
    /// `[T, 4]` normalized `(cx, cy, w, h)`, each in (0, 1).
    pub boxes: NodeId,
    /// `[T, pixel_side^2]` mask logits on the stride-4 grid.
    pub mask_logits: NodeId,
}

/// All layers of predictions plus row bookkeeping.
pub struct PredictionSet {
    pub layers: Vec<LayerPrediction>,
    /// Ordinary (matched) query count; rows `0..num_query`.
    pub num_query: usize,
    /// Denoising rows follow: `num_query..num_query+num_denoising`.
    pub num_denoising: usize,
    pub pixel_side: usize,
}

impl PredictionSet {
    /// The layer used at inference time.
    pub fn final_layer(&self) -> &LayerPrediction {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// Projected per-level value grids, computed once per forward pass and
/// shared by every decoder layer.
pub struct ValueGrids {
    pub values: Vec<NodeId>,
    pub sides: Vec<usize>,
}

impl Model {
    /// Projects each pyramid level into decoder width.
    pub fn project_values(&self, g: &mut Graph, enc: &EncodedImage) -> ValueGrids {
        let values =
            enc.levels.iter().map(|&lvl| self.linear_named(g, lvl, "dec.value")).collect();
        ValueGrids { values, sides: enc.level_sides.clone() }
    }

    /// Deformable cross-attention residual for layer `layer`: each query
    /// samples `P` points per level at tanh-bounded offsets inside its
    /// reference box, mixes the samples with softmax weights, and adds the
    /// projected result back onto itself.
    pub fn deform_cross(
        &self,
        g: &mut Graph,
        x: NodeId,
        references: NodeId,
        vals: &ValueGrids,
        layer: usize,
    ) -> NodeId {
        let p = self.config.sampling_points;
        let n = self.norm_named(g, x, &format!("dec.{layer}.norm1"));
        let off = self.linear_named(g, n, &format!("dec.{layer}.off"));
        let off = g.tanh(off); // [T, 3P*2] in (-1, 1)
        let aw_logits = self.linear_named(g, n, &format!("dec.{layer}.aw"));
        let aw = g.softmax_rows(aw_logits); // [T, 3P]

        let ref_x = g.slice_cols(references, 0, 1);
        let ref_y = g.slice_cols(references, 1, 1);
        let half_w = g.slice_cols(references, 2, 1);
        let half_w = g.scale(half_w, 0.5);
        let half_h = g.slice_cols(references, 3, 1);
        let half_h = g.scale(half_h, 0.5);

        let mut sampled = Vec::with_capacity(vals.values.len() * p);
        for (lvl, &val) in vals.values.iter().enumerate() {
            let side = vals.sides[lvl];
            for pt in 0..p {
                let col = (lvl * p + pt) * 2;
                let dx = g.slice_cols(off, col, 1);
                let dy = g.slice_cols(off, col + 1, 1);
                let sx = g.mul(dx, half_w);
                let sx = g.add(ref_x, sx);
                let sy = g.mul(dy, half_h);
                let sy = g.add(ref_y, sy);
                let pos = g.concat_cols(&[sx, sy]);
                sampled.push(g.bilinear_sample(val, side, side, pos));
            }
        }
        let mixed = g.mix_k(&sampled, aw);
        let out = self.linear_named(g, mixed, &format!("dec.{layer}.cross_out"));
        g.add(x, out)
    }

    /// One full decoder layer: deformable cross-attention, masked
    /// self-attention, feed-forward. Returns updated query states.
    fn decoder_layer(
        &self,
        g: &mut Graph,
        x: NodeId,
        references: NodeId,
        vals: &ValueGrids,
        layer: usize,
        attn_mask: Option<NodeId>,
    ) -> NodeId {
        let x = self.deform_cross(g, x, references, vals, layer);
        let n = self.norm_named(g, x, &format!("dec.{layer}.norm2"));
        let a = self.mha(g, n, &format!("dec.{layer}.attn"), self.config.decoder_heads, attn_mask);
        let x = g.add(x, a);
        self.ffn_block(g, x, &format!("dec.{layer}.norm3"), &format!("dec.{layer}.ff"))
    }

    /// Shared box head: residual update in inverse-sigmoid space. The final
    /// projection is zero-initialized, so a freshly constructed model
    /// predicts its reference boxes unchanged.
    pub fn box_head(&self, g: &mut Graph, x: NodeId, references: NodeId) -> NodeId {
        let h = self.linear_named(g, x, "head.box1");
        let h = g.gelu(h);
        let delta = self.linear_named(g, h, "head.box2");
        let base = inverse_sigmoid(g, references);
        let raw = g.add(base, delta);
        g.sigmoid(raw)
    }

    /// Shared similarity head. Word-based: scaled cosine of the projected
    /// query against each aligned label embedding plus a learnable
    /// no-object column, `[T, M+1]`. Sentence-based: one scaled-cosine match
    /// score per query against the single expression embedding, `[T, 1]`.
    pub fn similarity_head(
        &self,
        g: &mut Graph,
        x: NodeId,
        aligned_text: NodeId,
        mode: Granularity,
    ) -> Result<NodeId, ModelError> {
        let m = g.value(aligned_text).rows();
        if m == 0 {
            return Err(ModelError::NoTextEmbeddings);
        }
        if mode == Granularity::SentenceBased && m != 1 {
            return Err(ModelError::CountMismatch {
                detail: format!("sentence mode scores one expression, got {m}"),
            });
        }
        let proj = self.similarity_projection(g, x);
        let qn = g.l2_normalize_rows(proj, 1e-12);
        let tn = g.l2_normalize_rows(aligned_text, 1e-12);
        let tt = g.transpose(tn);
        let cos = g.matmul(qn, tt); // [T, M]
        let log_tau = g.param(&self.store, self.pid("qry.log_tau"));
        let tau = g.exp(log_tau);
        let scaled = g.scale_by(cos, tau);
        match mode {
            Granularity::SentenceBased => Ok(scaled),
            Granularity::WordBased => {
                let rows = g.value(x).rows();
                let no_obj = g.param(&self.store, self.pid("head.no_obj"));
                let col = g.repeat_rows(no_obj, rows);
                Ok(g.concat_cols(&[scaled, col]))
            }
        }
    }

    /// Query-side projection into the visual width used by the similarity
    /// head, `[T, d_vis]` (cosine is taken after L2 normalization).
    pub fn similarity_projection(&self, g: &mut Graph, x: NodeId) -> NodeId {
        self.mlp2(g, x, "head.sim")
    }

    /// Query-side mask projection, `[T, d_dec]`.
    pub fn mask_projection(&self, g: &mut Graph, x: NodeId) -> NodeId {
        self.mlp2(g, x, "head.mask")
    }

    /// Mask logits: plain inner products between projected queries and the
    /// per-pixel embedding map (no bias), `[T, pixel_side^2]`.
    pub fn mask_logits_from(&self, g: &mut Graph, proj: NodeId, pixel: NodeId) -> NodeId {
        let pt = g.transpose(pixel);
        g.matmul(proj, pt)
    }

    /// Full mask head.
    pub fn mask_head(&self, g: &mut Graph, x: NodeId, pixel: NodeId) -> NodeId {
        let proj = self.mask_projection(g, x);
        self.mask_logits_from(g, proj, pixel)
    }

    /// Runs the decoder stack.
    ///
    /// Ordinary queries from `qs` occupy rows `0..N`; denoising queries (if
    /// any) are appended and isolated from them by the attention mask.
    /// During training the heads run on every layer; at inference only the
    /// final layer is materialized.
    pub fn decode(
        &self,
        g: &mut Graph,
        enc: &EncodedImage,
        qs: &QuerySet,
        aligned_text: NodeId,
        mode: Granularity,
        dn: Option<&DenoisingBatch>,
        phase: DecodePhase,
    ) -> Result<PredictionSet, ModelError> {
        let vals = self.project_values(g, enc);
        let num_query = g.value(qs.content).rows();
        let num_denoising = dn.map(|d| d.len()).unwrap_or(0);

        let (mut x, mut references, attn_mask) = match dn {
            Some(batch) => {
                let content = g.concat_rows(&[qs.content, batch.content]);
                let dn_refs = g.constant(batch.references.clone());
                let refs = g.concat_rows(&[qs.references, dn_refs]);
                let mask = g.constant(denoising_attention_mask(
                    num_query,
                    batch.groups,
                    batch.per_group,
                ));
                (content, refs, Some(mask))
            }
            None => (qs.content, qs.references, None),
        };

        let mut layers = Vec::new();
        for layer in 0..self.config.decoder_layers {
            x = self.decoder_layer(g, x, references, &vals, layer, attn_mask);
            let boxes = self.box_head(g, x, references);
            let last = layer + 1 == self.config.decoder_layers;
            if phase == DecodePhase::Training || last {
                let class_logits = self.similarity_head(g, x, aligned_text, mode)?;
                let mask_logits = self.mask_head(g, x, enc.pixel);
                layers.push(LayerPrediction { class_logits, boxes, mask_logits });
            }
            if !last {
                references = g.detach(boxes);
            }
        }
        Ok(PredictionSet {
            layers,
            num_query,
            num_denoising,
            pixel_side: enc.pixel_side,
        })
    }
}

/// Additive attention mask for `[ordinary | group 0 | group 1 | …]` rows:
/// ordinary queries see only each other; each denoising group sees only
/// itself. Allowed entries are 0, forbidden are `-inf`.
pub fn denoising_attention_mask(num_query: usize, groups: usize, per_group: usize) -> Tensor {
    let total = num_query + groups * per_group;
    let block = |i: usize| -> usize {
        if i < num_query {
            0
        } else {
            1 + (i - num_query) / per_group
        }
    };
    let mut m = Tensor::zeros(total, total);
    for i in 0..total {
        for j in 0..total {
            if block(i) != block(j) {
                m.set(i, j, f64::NEG_INFINITY);
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn denoising_mask_blocks_cross_group_connectivity() {
        let m = denoising_attention_mask(2, 2, 3);
        assert_eq!(m.shape(), (8, 8));
        // ordinary <-> ordinary open
        assert_eq!(m.get(0, 1), 0.0);
        // ordinary <-> denoising closed both ways
        assert_eq!(m.get(0, 2), f64::NEG_INFINITY);
        assert_eq!(m.get(2, 0), f64::NEG_INFINITY);
        // within group 0 open, across groups closed
        assert_eq!(m.get(2, 4), 0.0);
        assert_eq!(m.get(2, 5), f64::NEG_INFINITY);
        assert_eq!(m.get(5, 2), f64::NEG_INFINITY);
        assert_eq!(m.get(5, 7), 0.0);
    }
}
