//! Matching cost between predicted queries and annotated instances.
//!
//! Costs are evaluated on detached prediction values — the assignment is a
//! discrete decision, so no gradient flows through it. Entries reuse the
//! loss formulas, except that the classification term enters as a negated
//! probability rather than a log-probability (the usual set-prediction
//! convention, which keeps the class term bounded and commensurate with the
//! geometric terms).

use percept_autograd::Graph;
use percept_core::{BBox, SoftMask};
use percept_model::{Granularity, PredictionSet};

use crate::scalar;
use crate::{LossWeights, ObjectiveError};

/// One annotated instance, in the resolution the decoder predicts at.
#[derive(Debug, Clone)]
pub struct TargetInstance {
    /// Index into the instruction's label list (word mode). Sentence-mode
    /// samples describe a single expression, so the label is ignored there.
    pub label: usize,
    /// Normalized center-form box.
    pub bbox: BBox,
    /// Soft occupancy on the prediction grid (`pixel_side²` cells), usually
    /// an area-weighted downsample of the full-resolution mask. `None` for
    /// box-only sources, which contribute no mask terms.
    pub mask: Option<SoftMask>,
}

impl TargetInstance {
    pub(crate) fn box_fields(&self) -> [f64; 4] {
        [self.bbox.cx, self.bbox.cy, self.bbox.w, self.bbox.h]
    }
}

/// Builds the `num_query × targets.len()` matching cost matrix for one
/// decoder layer:
///
/// `C[q,t] = λ_cls·(−p_q(t)) + λ_l1·‖b_q−b_t‖₁ + λ_giou·(1−GIoU) +
///  λ_bce·bce + λ_dice·dice`
///
/// where the mask terms are dropped for targets without masks. Denoising
/// rows are excluded; they carry a fixed assignment instead.
pub fn cost_matrix(
    g: &Graph,
    preds: &PredictionSet,
    layer_index: usize,
    targets: &[TargetInstance],
    mode: Granularity,
    w: &LossWeights,
) -> Result<Vec<Vec<f64>>, ObjectiveError> {
    w.validate()?;
    let layer = &preds.layers[layer_index];
    let class = g.value(layer.class_logits);
    let boxes = g.value(layer.boxes);
    let masks = g.value(layer.mask_logits);
    let q_total = preds.num_query;
    let grid = preds.pixel_side;

    match mode {
        Granularity::WordBased => {
            if class.cols() < 2 {
                return Err(ObjectiveError::CountMismatch {
                    context: "word-mode class columns (labels + no-object)",
                    expected: 2,
                    got: class.cols(),
                });
            }
        }
        Granularity::SentenceBased => {
            if class.cols() != 1 {
                return Err(ObjectiveError::CountMismatch {
                    context: "sentence-mode class columns",
                    expected: 1,
                    got: class.cols(),
                });
            }
        }
    }
    let num_labels = class.cols() - 1;
    for t in targets {
        if mode == Granularity::WordBased && t.label >= num_labels {
            return Err(ObjectiveError::LabelOutOfRange { label: t.label, classes: num_labels });
        }
        if let Some(m) = &t.mask {
            if m.height() != grid || m.width() != grid {
                return Err(ObjectiveError::MaskGridMismatch {
                    expected: grid,
                    got_h: m.height(),
                    got_w: m.width(),
                });
            }
        }
    }

    let mut out = Vec::with_capacity(q_total);
    for q in 0..q_total {
        let cls_row = class.row(q);
        let probs = match mode {
            Granularity::WordBased => scalar::softmax(cls_row),
            Granularity::SentenceBased => vec![scalar::sigmoid(cls_row[0])],
        };
        let pred_box = [boxes.get(q, 0), boxes.get(q, 1), boxes.get(q, 2), boxes.get(q, 3)];
        let mask_row = masks.row(q);
        let mut row = Vec::with_capacity(targets.len());
        for t in targets {
            let (lambda_cls, prob) = match mode {
                Granularity::WordBased => (w.word, probs[t.label]),
                Granularity::SentenceBased => (w.sent, probs[0]),
            };
            let mut c = lambda_cls * (-prob)
                + w.l1 * scalar::box_l1(pred_box, t.box_fields())
                + w.giou * scalar::box_giou_loss(pred_box, t.box_fields());
            if let Some(m) = &t.mask {
                c += w.bce * scalar::mask_bce(mask_row, m.data())
                    + w.dice * scalar::mask_dice(mask_row, m.data());
            }
            row.push(c);
        }
        out.push(row);
    }
    Ok(out)
}
