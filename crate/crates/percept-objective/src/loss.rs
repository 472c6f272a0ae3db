//! Differentiable loss terms and the per-layer composite objective.

use percept_autograd::{Graph, NodeId, Tensor};
use percept_model::{DenoisingBatch, Granularity, PredictionSet};

use crate::cost::{cost_matrix, TargetInstance};
use crate::hungarian::{hungarian, MatchResult};
use crate::{LossWeights, ObjectiveError};

/// Per-row box regression terms for `[P, 4]` center-form boxes.
pub struct BoxTerms {
    /// `[P, 1]` sum of absolute coordinate differences.
    pub l1: NodeId,
    /// `[P, 1]` `1 − GIoU` on unclamped corners.
    pub giou: NodeId,
}

/// Per-row mask quality terms for `[P, cells]` logits.
pub struct MaskTerms {
    /// `[P, 1]` mean pixel binary cross-entropy.
    pub bce: NodeId,
    /// `[P, 1]` Dice loss with ε = 1 on sigmoid probabilities.
    pub dice: NodeId,
}

/// One itemized entry of the composite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub name: &'static str,
    /// Decoder layer the term came from; `None` for the next-token term.
    pub layer: Option<usize>,
    /// Whether the term supervises denoising rows (fixed assignment).
    pub denoising: bool,
    /// Unweighted term value.
    pub value: f64,
    pub weight: f64,
}

impl LossTerm {
    pub fn weighted(&self) -> f64 {
        self.weight * self.value
    }
}

/// Itemized breakdown of a sample's loss.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
}

impl LossReport {
    /// Recomposition of the total from the itemized terms.
    pub fn total(&self) -> f64 {
        self.terms.iter().map(LossTerm::weighted).sum()
    }

    /// Value of a named term, summed over layers (and denoising rows).
    pub fn sum_of(&self, name: &str) -> f64 {
        self.terms.iter().filter(|t| t.name == name).map(LossTerm::weighted).sum()
    }

    /// Structured log lines, one per term.
    pub fn log_lines(&self) -> Vec<String> {
        self.terms
            .iter()
            .map(|t| {
                let layer = t.layer.map_or_else(|| "-".to_string(), |l| l.to_string());
                format!(
                    "loss name={} layer={} dn={} value={:.6} weight={} weighted={:.6}",
                    t.name,
                    layer,
                    t.denoising,
                    t.value,
                    t.weight,
                    t.weighted()
                )
            })
            .collect()
    }
}

/// Composite loss of one sample: the scalar tape node to backpropagate,
/// the itemized report, and the per-layer assignments that produced it.
#[derive(Debug)]
pub struct SampleLoss {
    pub total: NodeId,
    pub report: LossReport,
    pub matches: Vec<MatchResult>,
}

/// Per-row L1 and GIoU-loss between `[P, 4]` predicted and target boxes.
/// Corners are intentionally not clamped to the unit square: the
/// regression signal must keep pointing even when a predicted box hangs
/// over the border.
pub fn box_regression_terms(g: &mut Graph, pred: NodeId, gt: NodeId) -> BoxTerms {
    let diff = g.sub(pred, gt);
    let adiff = g.abs(diff);
    let l1 = g.sum_rows(adiff);

    let col = |g: &mut Graph, x: NodeId, j: usize| g.slice_cols(x, j, 1);
    let corners = |g: &mut Graph, b: NodeId| {
        let cx = col(g, b, 0);
        let cy = col(g, b, 1);
        let w = col(g, b, 2);
        let h = col(g, b, 3);
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        let x1 = g.sub(cx, hw);
        let x2 = g.add(cx, hw);
        let y1 = g.sub(cy, hh);
        let y2 = g.add(cy, hh);
        let area = g.mul(w, h);
        (x1, y1, x2, y2, area)
    };
    let (px1, py1, px2, py2, pa) = corners(g, pred);
    let (gx1, gy1, gx2, gy2, ga) = corners(g, gt);

    let ix1 = g.max2(px1, gx1);
    let iy1 = g.max2(py1, gy1);
    let ix2 = g.min2(px2, gx2);
    let iy2 = g.min2(py2, gy2);
    let iwr = g.sub(ix2, ix1);
    let ihr = g.sub(iy2, iy1);
    let iw = g.relu(iwr);
    let ih = g.relu(ihr);
    let inter = g.mul(iw, ih);

    let areas = g.add(pa, ga);
    let union = g.sub(areas, inter);
    let iou = g.div(inter, union);

    let hx1 = g.min2(px1, gx1);
    let hy1 = g.min2(py1, gy1);
    let hx2 = g.max2(px2, gx2);
    let hy2 = g.max2(py2, gy2);
    let hw_ = g.sub(hx2, hx1);
    let hh_ = g.sub(hy2, hy1);
    let hull = g.mul(hw_, hh_);
    let slack = g.sub(hull, union);
    let penalty = g.div(slack, hull);

    let giou_val = g.sub(iou, penalty);
    let neg = g.scale(giou_val, -1.0);
    let giou = g.add_scalar(neg, 1.0);
    BoxTerms { l1, giou }
}

/// Per-row mean BCE and Dice loss between `[P, cells]` mask logits and
/// fixed soft targets in `[0, 1]`.
pub fn mask_quality_terms(g: &mut Graph, logits: NodeId, targets: &Tensor) -> MaskTerms {
    let cells = targets.cols();
    let bce_all = g.bce_logits(logits, targets.clone());
    let bce_sum = g.sum_rows(bce_all);
    let bce = g.scale(bce_sum, 1.0 / cells as f64);

    let p = g.sigmoid(logits);
    let tgt = g.constant(targets.clone());
    let pg = g.mul(p, tgt);
    let inter = g.sum_rows(pg);
    let psum = g.sum_rows(p);
    let tsum = g.sum_rows(tgt);
    let den = g.add(psum, tsum);
    let num2 = g.scale(inter, 2.0);
    let num = g.add_scalar(num2, 1.0);
    let den1 = g.add_scalar(den, 1.0);
    let ratio = g.div(num, den1);
    let negr = g.scale(ratio, -1.0);
    let dice = g.add_scalar(negr, 1.0);
    MaskTerms { bce, dice }
}

/// Classification loss over all given rows. `assigned[i]` carries the
/// instruction-label index supervising row `i`, or `None` for a negative
/// row. Word mode is a softmax cross-entropy over labels plus a trailing
/// no-object class (negatives train toward no-object); sentence mode is a
/// per-row BCE on the single grounding score (negatives train toward 0).
/// Returns the mean over rows.
pub fn classification_loss(
    g: &mut Graph,
    logits: NodeId,
    mode: Granularity,
    assigned: &[Option<usize>],
) -> Result<NodeId, ObjectiveError> {
    let (rows, cols) = g.value(logits).shape();
    if assigned.len() != rows {
        return Err(ObjectiveError::CountMismatch {
            context: "classification assignment rows",
            expected: rows,
            got: assigned.len(),
        });
    }
    match mode {
        Granularity::WordBased => {
            if cols < 2 {
                return Err(ObjectiveError::CountMismatch {
                    context: "word-mode class columns (labels + no-object)",
                    expected: 2,
                    got: cols,
                });
            }
            let no_object = cols - 1;
            let mut targets = Vec::with_capacity(rows);
            for a in assigned {
                match a {
                    Some(label) if *label >= no_object => {
                        return Err(ObjectiveError::LabelOutOfRange {
                            label: *label,
                            classes: no_object,
                        })
                    }
                    Some(label) => targets.push(*label),
                    None => targets.push(no_object),
                }
            }
            let ce = g.cross_entropy_rows(logits, targets);
            Ok(g.mean_all(ce))
        }
        Granularity::SentenceBased => {
            if cols != 1 {
                return Err(ObjectiveError::CountMismatch {
                    context: "sentence-mode class columns",
                    expected: 1,
                    got: cols,
                });
            }
            let mut t = Tensor::zeros(rows, 1);
            for (i, a) in assigned.iter().enumerate() {
                if a.is_some() {
                    t.set(i, 0, 1.0);
                }
            }
            let bce = g.bce_logits(logits, t);
            Ok(g.mean_all(bce))
        }
    }
}

/// `(row, target)` pairs used by the box/mask term builders.
struct PairSet<'a> {
    rows: Vec<usize>,
    targets: Vec<&'a TargetInstance>,
}

impl<'a> PairSet<'a> {
    fn from_pairs(pairs: &[(usize, usize)], offset: usize, targets: &'a [TargetInstance]) -> Self {
        Self {
            rows: pairs.iter().map(|&(q, _)| q + offset).collect(),
            targets: pairs.iter().map(|&(_, t)| &targets[t]).collect(),
        }
    }

    fn gt_box_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(self.targets.len(), 4);
        for (i, tgt) in self.targets.iter().enumerate() {
            let f = tgt.box_fields();
            for (j, v) in f.into_iter().enumerate() {
                t.set(i, j, v);
            }
        }
        t
    }

    /// Subset carrying masks, with the flattened target grid.
    fn masked(&self, cells: usize) -> (Vec<usize>, Option<Tensor>) {
        let with: Vec<usize> =
            (0..self.rows.len()).filter(|&i| self.targets[i].mask.is_some()).collect();
        if with.is_empty() {
            return (Vec::new(), None);
        }
        let mut t = Tensor::zeros(with.len(), cells);
        for (out_i, &i) in with.iter().enumerate() {
            let m = self.targets[i].mask.as_ref().expect("filtered to masked targets");
            for (j, &v) in m.data().iter().enumerate() {
                t.set(out_i, j, v);
            }
        }
        (with.iter().map(|&i| self.rows[i]).collect(), Some(t))
    }
}

/// Accumulates weighted scalar terms into one tape node plus the report.
struct Accumulator {
    total: NodeId,
    report: LossReport,
}

impl Accumulator {
    fn new(g: &mut Graph) -> Self {
        Self { total: g.scalar(0.0), report: LossReport::default() }
    }

    fn push(
        &mut self,
        g: &mut Graph,
        name: &'static str,
        layer: Option<usize>,
        denoising: bool,
        weight: f64,
        node: Option<NodeId>,
    ) {
        let value = node.map_or(0.0, |n| g.value(n).item());
        if let Some(n) = node {
            if weight != 0.0 {
                let scaled = g.scale(n, weight);
                self.total = g.add(self.total, scaled);
            }
        }
        self.report.terms.push(LossTerm { name, layer, denoising, value, weight });
    }
}

/// Builds the box/mask/classification terms for one decoder layer and one
/// row/target pairing, pushing them into the accumulator.
#[allow(clippy::too_many_arguments)]
fn layer_terms(
    g: &mut Graph,
    acc: &mut Accumulator,
    preds: &PredictionSet,
    layer_index: usize,
    pairs: &PairSet,
    assigned: &[Option<usize>],
    row_start: usize,
    mode: Granularity,
    denoising: bool,
    w: &LossWeights,
) -> Result<(), ObjectiveError> {
    let layer = &preds.layers[layer_index];
    let rows = assigned.len();

    let cls_rows = g.slice_rows(layer.class_logits, row_start, rows);
    let cls = classification_loss(g, cls_rows, mode, assigned)?;
    let (cls_name, cls_weight) = match mode {
        Granularity::WordBased => ("word", w.word),
        Granularity::SentenceBased => ("sent", w.sent),
    };
    acc.push(g, cls_name, Some(layer_index), denoising, cls_weight, Some(cls));

    let p = pairs.rows.len();
    if p > 0 {
        let pred = g.gather_rows(layer.boxes, pairs.rows.clone());
        let gt = g.constant(pairs.gt_box_tensor());
        let terms = box_regression_terms(g, pred, gt);
        let l1_sum = g.sum_all(terms.l1);
        let l1 = g.scale(l1_sum, 1.0 / p as f64);
        let giou_sum = g.sum_all(terms.giou);
        let giou = g.scale(giou_sum, 1.0 / p as f64);
        acc.push(g, "l1", Some(layer_index), denoising, w.l1, Some(l1));
        acc.push(g, "giou", Some(layer_index), denoising, w.giou, Some(giou));
    } else {
        acc.push(g, "l1", Some(layer_index), denoising, w.l1, None);
        acc.push(g, "giou", Some(layer_index), denoising, w.giou, None);
    }

    let cells = preds.pixel_side * preds.pixel_side;
    let (mask_rows, mask_targets) = pairs.masked(cells);
    if let Some(targets) = mask_targets {
        let pm = mask_rows.len();
        let logits = g.gather_rows(layer.mask_logits, mask_rows);
        let terms = mask_quality_terms(g, logits, &targets);
        let bce_sum = g.sum_all(terms.bce);
        let bce = g.scale(bce_sum, 1.0 / pm as f64);
        let dice_sum = g.sum_all(terms.dice);
        let dice = g.scale(dice_sum, 1.0 / pm as f64);
        acc.push(g, "bce", Some(layer_index), denoising, w.bce, Some(bce));
        acc.push(g, "dice", Some(layer_index), denoising, w.dice, Some(dice));
    } else {
        acc.push(g, "bce", Some(layer_index), denoising, w.bce, None);
        acc.push(g, "dice", Some(layer_index), denoising, w.dice, None);
    }
    Ok(())
}

/// Composite loss over every decoder layer: per-layer optimal assignment
/// on detached costs, classification over all query rows, box and mask
/// terms over matched rows, denoising rows supervised under their fixed
/// assignment, and the optional next-token term.
pub fn total_loss(
    g: &mut Graph,
    preds: &PredictionSet,
    dn: Option<&DenoisingBatch>,
    targets: &[TargetInstance],
    mode: Granularity,
    llm: Option<NodeId>,
    w: &LossWeights,
) -> Result<SampleLoss, ObjectiveError> {
    w.validate()?;
    let dn_rows = dn.map_or(0, DenoisingBatch::len);
    if dn_rows != preds.num_denoising {
        return Err(ObjectiveError::CountMismatch {
            context: "denoising rows in predictions",
            expected: dn_rows,
            got: preds.num_denoising,
        });
    }
    if let Some(batch) = dn {
        for &t in &batch.gt_index {
            if t >= targets.len() {
                return Err(ObjectiveError::CountMismatch {
                    context: "denoising target index",
                    expected: targets.len(),
                    got: t,
                });
            }
        }
    }

    let mut acc = Accumulator::new(g);
    if let Some(llm_node) = llm {
        acc.push(g, "llm", None, false, w.llm, Some(llm_node));
    }

    let mut matches = Vec::with_capacity(preds.layers.len());
    for layer_index in 0..preds.layers.len() {
        let cost = cost_matrix(g, preds, layer_index, targets, mode, w)?;
        let m = hungarian(&cost)?;

        let mut assigned = vec![None; preds.num_query];
        for &(q, t) in &m.pairs {
            assigned[q] = Some(targets[t].label);
        }
        let pairs = PairSet::from_pairs(&m.pairs, 0, targets);
        layer_terms(g, &mut acc, preds, layer_index, &pairs, &assigned, 0, mode, false, w)?;

        if let Some(batch) = dn {
            let fixed: Vec<(usize, usize)> =
                batch.gt_index.iter().enumerate().map(|(r, &t)| (r, t)).collect();
            let dn_assigned: Vec<Option<usize>> =
                batch.gt_index.iter().map(|&t| Some(targets[t].label)).collect();
            let dn_pairs = PairSet::from_pairs(&fixed, preds.num_query, targets);
            layer_terms(
                g,
                &mut acc,
                preds,
                layer_index,
                &dn_pairs,
                &dn_assigned,
                preds.num_query,
                mode,
                true,
                w,
            )?;
        }
        matches.push(m);
    }

    Ok(SampleLoss { total: acc.total, report: acc.report, matches })
}
