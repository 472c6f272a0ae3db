//! Panoptic quality over joint category/instance maps.
//!
//! A [`PanopticScene`] is a partition: every pixel carries exactly one
//! `(category, instance)` pair or is void. Segments match when they share a
//! category and overlap with IoU strictly greater than 0.5, which makes the
//! matching unique without any assignment search. Void pixels belong to no
//! segment; a predicted segment overlapping ground-truth void simply loses
//! that area from its IoU.

use percept_core::{BinaryMask, MaskError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Category value for pixels outside every segment.
pub const VOID: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("scene shapes differ: {ah}x{aw} vs {bh}x{bw}")]
    ShapeMismatch { ah: usize, aw: usize, bh: usize, bw: usize },
    #[error("scene has zero extent: {h}x{w}")]
    ZeroExtent { h: usize, w: usize },
    #[error("buffer length {len} does not match {h}x{w}")]
    BadLength { h: usize, w: usize, len: usize },
    #[error("segments overlap at pixel ({row}, {col}); panoptic maps are partitions")]
    OverlappingSegments { row: usize, col: usize },
    #[error("duplicate segment id (category {category}, instance {instance})")]
    DuplicateSegment { category: u32, instance: u32 },
    #[error("category {0} is the reserved void marker")]
    ReservedCategory(u32),
    #[error("semantic maps differ in length: {a} vs {b}")]
    SemanticLength { a: usize, b: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Per-pixel panoptic labeling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanopticScene {
    height: usize,
    width: usize,
    category: Vec<u32>,
    instance: Vec<u32>,
}

impl PanopticScene {
    /// All-void scene.
    pub fn new(height: usize, width: usize) -> Result<Self, MetricError> {
        if height == 0 || width == 0 {
            return Err(MetricError::ZeroExtent { h: height, w: width });
        }
        Ok(Self {
            height,
            width,
            category: vec![VOID; height * width],
            instance: vec![0; height * width],
        })
    }

    /// Builds a scene from non-overlapping segment masks. Pixels covered by
    /// no segment stay void; overlaps and duplicate `(category, instance)`
    /// ids are rejected.
    pub fn from_segments(
        height: usize,
        width: usize,
        segments: &[(u32, u32, &BinaryMask)],
    ) -> Result<Self, MetricError> {
        let mut scene = Self::new(height, width)?;
        let mut seen = std::collections::BTreeSet::new();
        for &(category, instance, mask) in segments {
            if category == VOID {
                return Err(MetricError::ReservedCategory(category));
            }
            if !seen.insert((category, instance)) {
                return Err(MetricError::DuplicateSegment { category, instance });
            }
            if mask.height() != height || mask.width() != width {
                return Err(MetricError::ShapeMismatch {
                    ah: height,
                    aw: width,
                    bh: mask.height(),
                    bw: mask.width(),
                });
            }
            for r in 0..height {
                for c in 0..width {
                    if !mask.get(r, c) {
                        continue;
                    }
                    let i = r * width + c;
                    if scene.category[i] != VOID {
                        return Err(MetricError::OverlappingSegments { row: r, col: c });
                    }
                    scene.category[i] = category;
                    scene.instance[i] = instance;
                }
            }
        }
        Ok(scene)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn category_at(&self, row: usize, col: usize) -> u32 {
        self.category[row * self.width + col]
    }

    pub fn instance_at(&self, row: usize, col: usize) -> u32 {
        self.instance[row * self.width + col]
    }

    /// Per-pixel categories (void included), row-major.
    pub fn semantic(&self) -> &[u32] {
        &self.category
    }

    /// Pixel count per segment.
    pub fn segment_areas(&self) -> BTreeMap<(u32, u32), usize> {
        let mut areas = BTreeMap::new();
        for i in 0..self.category.len() {
            if self.category[i] != VOID {
                *areas.entry((self.category[i], self.instance[i])).or_insert(0) += 1;
            }
        }
        areas
    }

    /// Binary mask of one segment.
    pub fn segment_mask(&self, category: u32, instance: u32) -> Result<BinaryMask, MetricError> {
        Ok(BinaryMask::from_fn(self.height, self.width, |r, c| {
            let i = r * self.width + c;
            self.category[i] == category && self.instance[i] == instance
        })?)
    }
}

/// TP/FP/FN tallies and summed matched IoU for one category.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassPq {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassPq {
    pub fn pq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            return 0.0;
        }
        self.iou_sum / denom
    }

    /// Segmentation quality: mean IoU over true positives.
    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        self.iou_sum / self.tp as f64
    }

    /// Recognition quality: detection F-measure.
    pub fn rq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            return 0.0;
        }
        self.tp as f64 / denom
    }
}

/// Panoptic quality broken down by category.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PqReport {
    pub per_class: BTreeMap<u32, ClassPq>,
}

impl PqReport {
    fn mean_of(&self, f: impl Fn(&ClassPq) -> f64) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        self.per_class.values().map(f).sum::<f64>() / self.per_class.len() as f64
    }

    pub fn mean_pq(&self) -> f64 {
        self.mean_of(ClassPq::pq)
    }

    pub fn mean_sq(&self) -> f64 {
        self.mean_of(ClassPq::sq)
    }

    pub fn mean_rq(&self) -> f64 {
        self.mean_of(ClassPq::rq)
    }

    /// Merges another report into this one (multi-image accumulation).
    pub fn merge(&mut self, other: &PqReport) {
        for (cat, cp) in &other.per_class {
            let e = self.per_class.entry(*cat).or_default();
            e.iou_sum += cp.iou_sum;
            e.tp += cp.tp;
            e.fp += cp.fp;
            e.fn_ += cp.fn_;
        }
    }
}

/// Panoptic quality of a predicted scene against ground truth.
///
/// Matches are unique by construction: two segments of a partition can only
/// exceed IoU 0.5 with each other.
pub fn panoptic_quality(pred: &PanopticScene, gt: &PanopticScene) -> Result<PqReport, MetricError> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(MetricError::ShapeMismatch {
            ah: pred.height,
            aw: pred.width,
            bh: gt.height,
            bw: gt.width,
        });
    }
    let pred_areas = pred.segment_areas();
    let gt_areas = gt.segment_areas();

    // Joint intersection histogram over non-void pixels of both maps.
    let mut inter: BTreeMap<((u32, u32), (u32, u32)), usize> = BTreeMap::new();
    for i in 0..pred.category.len() {
        if pred.category[i] == VOID || gt.category[i] == VOID {
            continue;
        }
        let p = (pred.category[i], pred.instance[i]);
        let g = (gt.category[i], gt.instance[i]);
        *inter.entry((p, g)).or_insert(0) += 1;
    }

    let mut report = PqReport::default();
    let mut matched_pred = std::collections::BTreeSet::new();
    let mut matched_gt = std::collections::BTreeSet::new();
    for ((p, g), &ix) in &inter {
        if p.0 != g.0 {
            continue; // category must agree
        }
        let union = pred_areas[p] + gt_areas[g] - ix;
        let iou = ix as f64 / union as f64;
        if iou > 0.5 {
            let e = report.per_class.entry(p.0).or_default();
            e.tp += 1;
            e.iou_sum += iou;
            matched_pred.insert(*p);
            matched_gt.insert(*g);
        }
    }
    for p in pred_areas.keys() {
        if !matched_pred.contains(p) {
            report.per_class.entry(p.0).or_default().fp += 1;
        }
    }
    for g in gt_areas.keys() {
        if !matched_gt.contains(g) {
            report.per_class.entry(g.0).or_default().fn_ += 1;
        }
    }
    Ok(report)
}
