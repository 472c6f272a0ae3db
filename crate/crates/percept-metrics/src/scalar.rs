//! Scalar metrics: mean IoU, cumulative IoU, and box accuracy.

use crate::panoptic::{MetricError, VOID};
use percept_core::{box_iou, BBox, BinaryMask};
use std::collections::BTreeSet;

/// Mean intersection-over-union between two semantic maps (per-pixel class
/// ids, row-major, [`VOID`] allowed).
///
/// The average runs over the classes present in the ground truth; void
/// pixels in the ground truth are excluded entirely, while predicted void
/// simply fails to overlap anything.
pub fn mean_iou(pred: &[u32], gt: &[u32]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::SemanticLength { a: pred.len(), b: gt.len() });
    }
    let classes: BTreeSet<u32> = gt.iter().copied().filter(|&c| c != VOID).collect();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &class in &classes {
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..gt.len() {
            if gt[i] == VOID {
                continue;
            }
            let p = pred[i] == class;
            let g = gt[i] == class;
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
        if union > 0 {
            total += inter as f64 / union as f64;
        }
    }
    Ok(total / classes.len() as f64)
}

/// Dataset-cumulative IoU: sums intersections and unions across all added
/// pairs before dividing, so large objects weigh more than small ones.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CumulativeIou {
    inter: u64,
    union: u64,
    pairs: u64,
}

impl CumulativeIou {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one prediction/ground-truth pair. A pair where both masks are
    /// empty contributes nothing.
    pub fn add(&mut self, pred: &BinaryMask, gt: &BinaryMask) -> Result<(), MetricError> {
        self.inter += pred.intersection_count(gt)? as u64;
        self.union += pred.union_count(gt)? as u64;
        self.pairs += 1;
        Ok(())
    }

    pub fn pairs(&self) -> u64 {
        self.pairs
    }

    /// Cumulative IoU; 0 when nothing was accumulated.
    pub fn value(&self) -> f64 {
        if self.union == 0 {
            return 0.0;
        }
        self.inter as f64 / self.union as f64
    }
}

/// Fraction of prediction/ground-truth box pairs with IoU at or above the
/// threshold (the boundary counts as a hit). Empty input yields 0.
pub fn box_accuracy(pairs: &[(BBox, BBox)], threshold: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs.iter().filter(|(p, g)| box_iou(p, g) >= threshold).count();
    hits as f64 / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use percept_core::Corners;

    #[test]
    fn mean_iou_hand_case() {
        // 2x2: gt is [A, A, B, B], pred says A everywhere.
        // IoU(A) = 2/4, IoU(B) = 0 -> mean 0.25 over both gt classes.
        let gt = vec![0, 0, 1, 1];
        let pred = vec![0, 0, 0, 0];
        assert!((mean_iou(&pred, &gt).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mean_iou_ignores_gt_void() {
        let gt = vec![0, VOID, VOID, VOID];
        let pred = vec![0, 1, 1, 1]; // predictions on void pixels don't hurt
        assert!((mean_iou(&pred, &gt).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_iou_checks_lengths() {
        assert!(matches!(
            mean_iou(&[0, 1], &[0]),
            Err(MetricError::SemanticLength { a: 2, b: 1 })
        ));
    }

    #[test]
    fn cumulative_iou_weights_by_area() {
        // Pair 1: perfect 9-pixel match. Pair 2: 1-pixel pred misses
        // 1-pixel gt entirely (inter 0, union 2).
        // cIoU = 9 / 11, not the mean of (1.0, 0.0).
        let big = BinaryMask::from_fn(4, 4, |r, c| r < 3 && c < 3).unwrap();
        let mut acc = CumulativeIou::new();
        acc.add(&big, &big).unwrap();
        let mut p = BinaryMask::new(4, 4).unwrap();
        p.set(0, 3, true);
        let mut g = BinaryMask::new(4, 4).unwrap();
        g.set(3, 0, true);
        acc.add(&p, &g).unwrap();
        assert!((acc.value() - 9.0 / 11.0).abs() < 1e-12);
        assert_eq!(acc.pairs(), 2);
    }

    #[test]
    fn empty_pairs_are_neutral() {
        let e = BinaryMask::new(4, 4).unwrap();
        let mut acc = CumulativeIou::new();
        acc.add(&e, &e).unwrap();
        assert_eq!(acc.value(), 0.0);
        let full = BinaryMask::from_fn(4, 4, |_, _| true).unwrap();
        acc.add(&full, &full).unwrap();
        assert!((acc.value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_accuracy_boundary_is_inclusive() {
        // Nested boxes with area ratio 1/2 give IoU exactly 0.5; the >=
        // convention must count this as a hit.
        let inner = BBox::from_corners(Corners { x1: 0.0, y1: 0.0, x2: 0.2, y2: 0.2 }).unwrap();
        let outer = BBox::from_corners(Corners { x1: 0.0, y1: 0.0, x2: 0.4, y2: 0.2 }).unwrap();
        assert!((percept_core::box_iou(&inner, &outer) - 0.5).abs() < 1e-12);
        assert_eq!(box_accuracy(&[(inner, outer)], 0.5), 1.0);
    }

    #[test]
    fn box_accuracy_counts_fraction() {
        let hit = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let miss = BBox::new(0.2, 0.2, 0.1, 0.1).unwrap();
        let gt = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        assert!((box_accuracy(&[(hit, gt), (miss, gt)], 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(box_accuracy(&[], 0.5), 0.0);
    }
}
