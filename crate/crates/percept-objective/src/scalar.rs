//! Plain-`f64` evaluations of the individual loss terms, used to fill the
//! matching cost matrix. The differentiable tape versions in `loss` follow
//! the same formulas; tests cross-check the two paths against independent
//! oracles.

/// Softmax probabilities of one logits row.
pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sum of absolute center-form differences, `(cx, cy, w, h)` each.
pub(crate) fn box_l1(pred: [f64; 4], gt: [f64; 4]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum()
}

/// `1 − GIoU` on *unclamped* corners: the regression signal must keep
/// pointing even when a predicted box hangs over the image border, so this
/// deliberately skips the unit-square clamp used by display geometry.
pub(crate) fn box_giou_loss(pred: [f64; 4], gt: [f64; 4]) -> f64 {
    let [pcx, pcy, pw, ph] = pred;
    let [gcx, gcy, gw, gh] = gt;
    let (px1, px2) = (pcx - pw / 2.0, pcx + pw / 2.0);
    let (py1, py2) = (pcy - ph / 2.0, pcy + ph / 2.0);
    let (gx1, gx2) = (gcx - gw / 2.0, gcx + gw / 2.0);
    let (gy1, gy2) = (gcy - gh / 2.0, gcy + gh / 2.0);
    let iw = (px2.min(gx2) - px1.max(gx1)).max(0.0);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let union = pw * ph + gw * gh - inter;
    let hull = (px2.max(gx2) - px1.min(gx1)) * (py2.max(gy2) - py1.min(gy1));
    let giou = inter / union - (hull - union) / hull;
    1.0 - giou
}

/// Mean binary cross-entropy of logits against soft targets in `[0, 1]`,
/// in the stable `max(v,0) − v·t + ln(1+e^{−|v|})` form.
pub(crate) fn mask_bce(logits: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), targets.len());
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&v, &t)| v.max(0.0) - v * t + (-v.abs()).exp().ln_1p())
        .sum();
    total / logits.len() as f64
}

/// Dice loss `1 − (2Σp·g + ε)/(Σp + Σg + ε)` with `ε = 1` on sigmoid
/// probabilities.
pub(crate) fn mask_dice(logits: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), targets.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (&v, &t) in logits.iter().zip(targets) {
        let p = sigmoid(v);
        num += p * t;
        den += p + t;
    }
    1.0 - (2.0 * num + 1.0) / (den + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }

    #[test]
    fn identical_boxes_cost_nothing() {
        let b = [0.4, 0.5, 0.2, 0.3];
        assert_eq!(box_l1(b, b), 0.0);
        assert!(box_giou_loss(b, b).abs() < 1e-12);
    }

    #[test]
    fn edge_touching_squares_have_giou_loss_one() {
        // Two equal squares sharing a vertical edge: the hull equals the
        // union, so the penalty term vanishes and IoU is zero.
        let a = [0.25, 0.5, 0.5, 0.5];
        let b = [0.75, 0.5, 0.5, 0.5];
        assert!((box_giou_loss(a, b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn far_separated_boxes_approach_loss_two() {
        // Shrinking corner boxes: hull stays ~the unit square while the
        // union vanishes, so GIoU → −1 and the loss → 2 (never reaching it).
        let mut last = 0.0;
        for &s in &[0.2, 0.05, 0.01, 0.002] {
            let a = [s / 2.0, s / 2.0, s, s];
            let b = [1.0 - s / 2.0, 1.0 - s / 2.0, s, s];
            let loss = box_giou_loss(a, b);
            let hull = 1.0f64;
            let union = 2.0 * s * s;
            let expect = 1.0 + (hull - union) / hull;
            assert!((loss - expect).abs() < 1e-12, "closed form at s={s}");
            assert!(loss > 1.0 && loss < 2.0);
            assert!(loss > last, "loss must grow toward 2 as boxes shrink apart");
            last = loss;
        }
        assert!(last > 1.99);
    }

    #[test]
    fn saturated_correct_mask_logits_cost_nothing() {
        let targets = [1.0, 0.0, 1.0, 0.0];
        let logits = [60.0, -60.0, 60.0, -60.0];
        assert!(mask_bce(&logits, &targets) < 1e-12);
        assert!(mask_dice(&logits, &targets) < 1e-12);
    }

    #[test]
    fn soft_self_match_dice_follows_the_formula() {
        // p == g everywhere: dice = 1 − (2Σp² + 1)/(2Σp + 1).
        let logits = [0.3, -1.2, 2.0, 0.0, -0.4];
        let p: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
        let spp: f64 = p.iter().map(|v| v * v).sum();
        let sp: f64 = p.iter().sum();
        let expect = 1.0 - (2.0 * spp + 1.0) / (2.0 * sp + 1.0);
        assert!((mask_dice(&logits, &p) - expect).abs() < 1e-12);
    }
}
