//! Denoising queries: noised copies of the ground truth fed through the
//! decoder with a fixed (identity) assignment, isolated from the ordinary
//! queries by the attention mask.

use crate::model::{Model, ModelError};
use percept_autograd::{Graph, NodeId, Tensor};
use percept_core::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Noise magnitudes and group count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoisingConfig {
    pub groups: usize,
    /// Center shift (fraction of box size) and relative size scale.
    pub box_noise: f64,
    /// Probability of replacing a query's label with a random candidate.
    pub label_noise: f64,
}

impl Default for DenoisingConfig {
    fn default() -> Self {
        Self { groups: 2, box_noise: 0.4, label_noise: 0.2 }
    }
}

/// Noised ground-truth queries. Rows are ordered group-major: all of group
/// 0's copies (one per ground-truth instance, in order), then group 1's, …
pub struct DenoisingBatch {
    /// `[D, d_dec]` content looked up from label embeddings (noised labels).
    pub content: NodeId,
    /// `[D, 4]` jittered boxes, clamped inside (0, 1).
    pub references: Tensor,
    pub groups: usize,
    /// Queries per group = number of ground-truth instances.
    pub per_group: usize,
    /// Source ground-truth index for each row (fixed assignment).
    pub gt_index: Vec<usize>,
    /// Noised label fed to the content embedding, per row.
    pub noised_labels: Vec<usize>,
}

impl DenoisingBatch {
    pub fn len(&self) -> usize {
        self.groups * self.per_group
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn clamp01(v: f64, eps: f64) -> f64 {
    v.clamp(eps, 1.0 - eps)
}

impl Model {
    /// Builds denoising queries from ground truth `(label, box)` pairs.
    /// `num_candidate_labels` bounds the label-flip draw (the word-based
    /// candidate list length; 1 for sentence-based samples). Returns `None`
    /// when there is no ground truth.
    pub fn build_denoising(
        &self,
        g: &mut Graph,
        gt: &[(usize, BBox)],
        num_candidate_labels: usize,
        cfg: DenoisingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<DenoisingBatch>, ModelError> {
        if gt.is_empty() || cfg.groups == 0 {
            return Ok(None);
        }
        let max = self.config.max_labels;
        if num_candidate_labels == 0 || num_candidate_labels > max {
            return Err(ModelError::CountMismatch {
                detail: format!("{num_candidate_labels} candidate labels, embedding table holds {max}"),
            });
        }
        for &(label, _) in gt {
            if label >= num_candidate_labels {
                return Err(ModelError::CountMismatch {
                    detail: format!("ground-truth label {label} outside candidate list of {num_candidate_labels}"),
                });
            }
        }
        let per_group = gt.len();
        let d = cfg.groups * per_group;
        let mut references = Tensor::zeros(d, 4);
        let mut gt_index = Vec::with_capacity(d);
        let mut noised_labels = Vec::with_capacity(d);
        let mut row = 0;
        for _ in 0..cfg.groups {
            for (i, &(label, bbox)) in gt.iter().enumerate() {
                let u = |rng: &mut ChaCha8Rng| rng.gen_range(-1.0f64..1.0);
                let cx = bbox.cx + u(rng) * cfg.box_noise * bbox.w;
                let cy = bbox.cy + u(rng) * cfg.box_noise * bbox.h;
                let w = bbox.w * (1.0 + u(rng) * cfg.box_noise);
                let h = bbox.h * (1.0 + u(rng) * cfg.box_noise);
                references.set(row, 0, clamp01(cx, 1e-3));
                references.set(row, 1, clamp01(cy, 1e-3));
                references.set(row, 2, clamp01(w, 1e-3));
                references.set(row, 3, clamp01(h, 1e-3));
                let flip = cfg.label_noise > 0.0 && rng.gen_range(0.0f64..1.0) < cfg.label_noise;
                let noised = if flip { rng.gen_range(0..num_candidate_labels) } else { label };
                gt_index.push(i);
                noised_labels.push(noised);
                row += 1;
            }
        }
        let embed = g.param(&self.store, self.pid("dn.label_embed"));
        let content = g.gather_rows(embed, noised_labels.clone());
        Ok(Some(DenoisingBatch {
            content,
            references,
            groups: cfg.groups,
            per_group,
            gt_index,
            noised_labels,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tokenizer::Tokenizer;
    use rand::SeedableRng;

    fn model() -> Model {
        Model::new(ModelConfig::desk(), Tokenizer::build(["a"]), 0).unwrap()
    }

    fn boxes() -> Vec<(usize, BBox)> {
        vec![
            (0, BBox::new(0.3, 0.4, 0.2, 0.2).unwrap()),
            (1, BBox::new(0.7, 0.6, 0.1, 0.3).unwrap()),
            (2, BBox::new(0.5, 0.5, 0.4, 0.2).unwrap()),
        ]
    }

    #[test]
    fn zero_noise_reproduces_ground_truth() {
        let m = model();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = DenoisingConfig { groups: 2, box_noise: 0.0, label_noise: 0.0 };
        let batch = m.build_denoising(&mut g, &boxes(), 3, cfg, &mut rng).unwrap().unwrap();
        assert_eq!(batch.len(), 6);
        for (row, &src) in batch.gt_index.iter().enumerate() {
            let (label, bb) = boxes()[src];
            assert_eq!(batch.noised_labels[row], label);
            assert!((batch.references.get(row, 0) - bb.cx).abs() < 1e-12);
            assert!((batch.references.get(row, 2) - bb.w).abs() < 1e-12);
        }
    }

    #[test]
    fn group_counting() {
        let m = model();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = m
            .build_denoising(&mut g, &boxes(), 3, DenoisingConfig::default(), &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(batch.groups, 2);
        assert_eq!(batch.per_group, 3);
        assert_eq!(batch.len(), 6);
        assert_eq!(batch.gt_index, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(g.value(batch.content).shape(), (6, m.config.d_dec));
    }

    #[test]
    fn empty_ground_truth_gives_no_batch() {
        let m = model();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.build_denoising(&mut g, &[], 3, DenoisingConfig::default(), &mut rng).unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn noised_boxes_stay_normalized() {
        let m = model();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DenoisingConfig { groups: 4, box_noise: 0.9, label_noise: 0.5 };
        let batch = m.build_denoising(&mut g, &boxes(), 3, cfg, &mut rng).unwrap().unwrap();
        for r in 0..batch.len() {
            for c in 0..4 {
                let v = batch.references.get(r, c);
                assert!((0.0..=1.0).contains(&v), "reference {v} escaped [0,1]");
            }
        }
        assert!(batch.noised_labels.iter().all(|&l| l < 3));
    }
}
