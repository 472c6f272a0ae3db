//! Dynamic query generation: the summary vector expands into base queries,
//! instruction embeddings score every pyramid cell, and the top-N cells
//! contribute residuals and reference points. A learnable query bank
//! replaces selection when it is switched off, and extra learnable stuff
//! queries cover background regions in panoptic mode.

use crate::encoder::{grid_centers, EncodedImage};
use crate::model::{Model, ModelError};
use percept_autograd::{Graph, NodeId, Tensor};

/// Where a query came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryProvenance {
    /// Top-N selected cell: pyramid level index and flat cell within it.
    Selected { level: usize, cell: usize },
    /// Learnable bank slot (selection switched off).
    Bank(usize),
    /// Learnable stuff query.
    Stuff(usize),
}

/// Content vectors plus reference boxes for the decoder.
pub struct QuerySet {
    /// `[N + K, d_dec]`.
    pub content: NodeId,
    /// `[N + K, 4]` normalized `(cx, cy, w, h)`, all in (0, 1).
    pub references: NodeId,
    pub provenance: Vec<QueryProvenance>,
    /// Queries before the stuff block (N).
    pub num_instance: usize,
}

impl Model {
    /// Expands the summary vector into `n` base query vectors through a
    /// two-layer perceptron with `num_queries` output slots; `n` selects the
    /// first slots, so capacity bounds it.
    pub fn expand_base(&self, g: &mut Graph, summary: NodeId, n: usize) -> Result<NodeId, ModelError> {
        let cap = self.config.num_queries;
        if n == 0 || n > cap {
            return Err(ModelError::CountMismatch {
                detail: format!("requested {n} base queries, capacity {cap}"),
            });
        }
        let h = self.linear_named(g, summary, "qry.expand1");
        let h = g.gelu(h);
        let all = self.linear_named(g, h, "qry.expand2"); // [1, cap * d_dec]
        let take = g.slice_cols(all, 0, n * self.config.d_dec);
        Ok(g.reshape(take, n, self.config.d_dec))
    }

    /// Projects instruction embeddings (`[M, d_lm]`) into the visual width
    /// through the alignment perceptron, shared with the similarity head.
    pub fn align_text(&self, g: &mut Graph, text: NodeId) -> NodeId {
        self.mlp2(g, text, "qry.align")
    }

    /// Scaled-cosine similarity of every pyramid cell against every aligned
    /// instruction embedding, reduced per cell by max over embeddings.
    /// Output `[total_cells, 1]`, levels concatenated fine-to-coarse.
    pub fn score_features(
        &self,
        g: &mut Graph,
        enc: &EncodedImage,
        aligned: NodeId,
    ) -> Result<NodeId, ModelError> {
        let m = g.value(aligned).rows();
        if m == 0 {
            return Err(ModelError::NoTextEmbeddings);
        }
        let text_n = g.l2_normalize_rows(aligned, 1e-12);
        let text_t = g.transpose(text_n);
        let log_tau = g.param(&self.store, self.pid("qry.log_tau"));
        let tau = g.exp(log_tau);
        let mut per_level = Vec::with_capacity(enc.levels.len());
        for &feats in &enc.levels {
            let feats_n = g.l2_normalize_rows(feats, 1e-12);
            let sim = g.matmul(feats_n, text_t); // [cells, M], cosine in [-1, 1]
            let mut best = g.slice_cols(sim, 0, 1);
            for col in 1..m {
                let c = g.slice_cols(sim, col, 1);
                best = g.max2(best, c);
            }
            per_level.push(best);
        }
        let all = g.concat_rows(&per_level);
        let scaled = g.scale_by(all, tau);
        Ok(scaled)
    }

    /// Descending-score order over flat cell indices, ties to the smaller
    /// index; returns the first `n`.
    pub fn select_top_n(&self, scores: &Tensor, n: usize) -> Result<Vec<usize>, ModelError> {
        let cells = scores.rows();
        if n > cells {
            return Err(ModelError::SelectionOverflow { n, cells });
        }
        let mut idx: Vec<usize> = (0..cells).collect();
        idx.sort_by(|&a, &b| {
            scores.get(b, 0).partial_cmp(&scores.get(a, 0)).expect("finite scores").then(a.cmp(&b))
        });
        idx.truncate(n);
        Ok(idx)
    }

    /// Splits a flat cell index into (level, cell-within-level).
    pub fn split_flat_index(&self, flat: usize) -> (usize, usize) {
        let mut rest = flat;
        for (l, side) in self.config.level_sides().iter().enumerate() {
            let cells = side * side;
            if rest < cells {
                return (l, rest);
            }
            rest -= cells;
        }
        panic!("flat index {flat} outside the pyramid");
    }

    /// Normalized center of a flat cell index.
    pub fn flat_cell_center(&self, flat: usize) -> (f64, f64) {
        let (level, cell) = self.split_flat_index(flat);
        let side = self.config.level_sides()[level];
        let x = (cell % side) as f64;
        let y = (cell / side) as f64;
        ((x + 0.5) / side as f64, (y + 0.5) / side as f64)
    }

    /// Combines base vectors with the residuals of the selected cells and
    /// builds reference boxes at the cell centers with the learnable initial
    /// size; appends stuff queries when asked.
    pub fn assemble(
        &self,
        g: &mut Graph,
        enc: &EncodedImage,
        base: NodeId,
        selected: &[usize],
        include_stuff: bool,
    ) -> Result<QuerySet, ModelError> {
        let n = g.value(base).rows();
        if n != selected.len() {
            return Err(ModelError::CountMismatch {
                detail: format!("{n} base queries vs {} selected cells", selected.len()),
            });
        }
        let full = g.concat_rows(&enc.levels); // [total_cells, d_vis]
        let residual = g.gather_rows(full, selected.to_vec());
        let proj = self.linear_named(g, residual, "qry.resid");
        let mut content = g.add(base, proj);

        let mut centers = Tensor::zeros(n, 2);
        for (i, &flat) in selected.iter().enumerate() {
            let (x, y) = self.flat_cell_center(flat);
            centers.set(i, 0, x);
            centers.set(i, 1, y);
        }
        let centers = g.constant(centers);
        let size_raw = g.param(&self.store, self.pid("qry.size_raw"));
        let size = g.sigmoid(size_raw); // [1, 2] learnable (w0, h0)
        let sizes = g.repeat_rows(size, n);
        let mut references = g.concat_cols(&[centers, sizes]);

        let mut provenance: Vec<QueryProvenance> = selected
            .iter()
            .map(|&flat| {
                let (level, cell) = self.split_flat_index(flat);
                QueryProvenance::Selected { level, cell }
            })
            .collect();

        if include_stuff && self.config.num_stuff_queries > 0 {
            let k = self.config.num_stuff_queries;
            let stuff = g.param(&self.store, self.pid("qry.stuff"));
            content = g.concat_rows(&[content, stuff]);
            let full_img = g.constant(full_image_references(k));
            references = g.concat_rows(&[references, full_img]);
            provenance.extend((0..k).map(QueryProvenance::Stuff));
        }
        Ok(QuerySet { content, references, provenance, num_instance: n })
    }

    /// Learnable query bank used when selection is off: content and
    /// sigmoid-squashed reference boxes straight from parameters.
    pub fn query_bank(&self, g: &mut Graph, include_stuff: bool) -> QuerySet {
        let n = self.config.num_queries;
        let mut content = g.param(&self.store, self.pid("qry.bank.content"));
        let raw = g.param(&self.store, self.pid("qry.bank.ref_raw"));
        let mut references = g.sigmoid(raw);
        let mut provenance: Vec<QueryProvenance> = (0..n).map(QueryProvenance::Bank).collect();
        if include_stuff && self.config.num_stuff_queries > 0 {
            let k = self.config.num_stuff_queries;
            let stuff = g.param(&self.store, self.pid("qry.stuff"));
            content = g.concat_rows(&[content, stuff]);
            let full_img = g.constant(full_image_references(k));
            references = g.concat_rows(&[references, full_img]);
            provenance.extend((0..k).map(QueryProvenance::Stuff));
        }
        QuerySet { content, references, provenance, num_instance: n }
    }

    /// Full query-construction path: expand the summary, score the pyramid,
    /// select top-N, and assemble (or take the bank when selection is off).
    pub fn build_queries(
        &self,
        g: &mut Graph,
        enc: &EncodedImage,
        summary: NodeId,
        aligned_text: NodeId,
        include_stuff: bool,
    ) -> Result<QuerySet, ModelError> {
        if !self.config.query_selection {
            return Ok(self.query_bank(g, include_stuff));
        }
        let n = self.config.num_queries;
        let base = self.expand_base(g, summary, n)?;
        let scores = self.score_features(g, enc, aligned_text)?;
        let selected = self.select_top_n(g.value(scores), n)?;
        self.assemble(g, enc, base, &selected, include_stuff)
    }
}

/// Whole-image reference boxes for stuff queries, `[k, 4]`.
fn full_image_references(k: usize) -> Tensor {
    let mut t = Tensor::zeros(k, 4);
    for i in 0..k {
        t.set(i, 0, 0.5);
        t.set(i, 1, 0.5);
        t.set(i, 2, 1.0);
        t.set(i, 3, 1.0);
    }
    t
}

/// Convenience for tests and the harness: cell centers of every level
/// stacked into one `[total_cells, 2]` tensor, same order as flat indices.
pub fn all_cell_centers(level_sides: &[usize]) -> Tensor {
    let total: usize = level_sides.iter().map(|s| s * s).sum();
    let mut out = Tensor::zeros(total, 2);
    let mut row = 0;
    for &side in level_sides {
        let c = grid_centers(side);
        for i in 0..side * side {
            out.set(row, 0, c.get(i, 0));
            out.set(row, 1, c.get(i, 1));
            row += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tokenizer::Tokenizer;

    fn desk_model() -> Model {
        Model::new(ModelConfig::desk(), Tokenizer::build(["a"]), 1).unwrap()
    }

    #[test]
    fn top_n_ordering_and_ties() {
        let m = desk_model();
        let s = Tensor::col_vec(vec![0.9, 0.1, 0.5]);
        assert_eq!(m.select_top_n(&s, 2).unwrap(), vec![0, 2]);
        let equal = Tensor::col_vec(vec![0.4, 0.4, 0.4, 0.4]);
        assert_eq!(m.select_top_n(&equal, 3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(
            m.select_top_n(&s, 4),
            Err(ModelError::SelectionOverflow { n: 4, cells: 3 })
        ));
    }

    #[test]
    fn flat_index_round_trip() {
        let m = desk_model(); // sides [8, 4, 2]
        assert_eq!(m.split_flat_index(0), (0, 0));
        assert_eq!(m.split_flat_index(63), (0, 63));
        assert_eq!(m.split_flat_index(64), (1, 0));
        assert_eq!(m.split_flat_index(64 + 16), (2, 0));
        assert_eq!(m.split_flat_index(64 + 16 + 3), (2, 3));
        let (x, y) = m.flat_cell_center(64 + 16); // coarsest 2x2, cell 0
        assert_eq!((x, y), (0.25, 0.25));
    }

    #[test]
    fn cell_center_table_matches_helper() {
        let m = desk_model();
        let centers = all_cell_centers(&m.config.level_sides());
        assert_eq!(centers.rows(), m.config.total_cells());
        for flat in [0usize, 10, 63, 64, 70, 83] {
            let (x, y) = m.flat_cell_center(flat);
            assert_eq!(centers.get(flat, 0), x);
            assert_eq!(centers.get(flat, 1), y);
        }
    }
}
