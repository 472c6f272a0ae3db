//! Dense binary and soft (probability) masks.
//!
//! Masks are row-major grids tied to a pixel resolution. Binary masks are the
//! ground-truth currency; soft masks are what heads predict, and they only
//! become binary through an explicit threshold.

use crate::geometry::{BBox, Corners, GeometryError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask dimensions {h}x{w} do not match buffer length {len}")]
    BadLength { h: usize, w: usize, len: usize },
    #[error("mask shapes differ: {ah}x{aw} vs {bh}x{bw}")]
    ShapeMismatch { ah: usize, aw: usize, bh: usize, bw: usize },
    #[error("soft mask value {value} at index {index} is outside [0, 1]")]
    BadProbability { index: usize, value: f64 },
    #[error("mask has zero extent: {h}x{w}")]
    ZeroExtent { h: usize, w: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Dense boolean mask at a fixed resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    /// All-false mask.
    pub fn new(height: usize, width: usize) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::ZeroExtent { h: height, w: width });
        }
        Ok(Self { height, width, data: vec![false; height * width] })
    }

    pub fn from_data(height: usize, width: usize, data: Vec<bool>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::ZeroExtent { h: height, w: width });
        }
        if data.len() != height * width {
            return Err(MaskError::BadLength { h: height, w: width, len: data.len() });
        }
        Ok(Self { height, width, data })
    }

    /// Builds a mask by evaluating `f(row, col)` at every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, MaskError> {
        let mut m = Self::new(height, width)?;
        for r in 0..height {
            for c in 0..width {
                m.data[r * width + c] = f(r, c);
            }
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&b| !b)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.check_shape(other)?;
        Ok(self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_count(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.check_shape(other)?;
        Ok(self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count())
    }

    /// Intersection-over-union. Two empty masks have IoU 0 by convention,
    /// so an all-background prediction never counts as a perfect match.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64, MaskError> {
        let union = self.union_count(other)?;
        if union == 0 {
            return Ok(0.0);
        }
        Ok(self.intersection_count(other)? as f64 / union as f64)
    }

    /// Tight bounding box in normalized coordinates, covering full pixel
    /// extents. `None` for an empty mask.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let mut rmin = usize::MAX;
        let mut rmax = 0usize;
        let mut cmin = usize::MAX;
        let mut cmax = 0usize;
        let mut any = false;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.data[r * self.width + c] {
                    any = true;
                    rmin = rmin.min(r);
                    rmax = rmax.max(r);
                    cmin = cmin.min(c);
                    cmax = cmax.max(c);
                }
            }
        }
        if !any {
            return None;
        }
        let corners = Corners {
            x1: cmin as f64 / self.width as f64,
            y1: rmin as f64 / self.height as f64,
            x2: (cmax + 1) as f64 / self.width as f64,
            y2: (rmax + 1) as f64 / self.height as f64,
        };
        Some(BBox::from_corners(corners).expect("pixel extents form a valid box"))
    }

    /// Area-averaged downsample: each output cell holds the covered fraction
    /// of the corresponding input region. Used to build low-resolution soft
    /// supervision targets from full-resolution masks.
    pub fn area_downsample(&self, out_h: usize, out_w: usize) -> Result<SoftMask, MaskError> {
        if out_h == 0 || out_w == 0 {
            return Err(MaskError::ZeroExtent { h: out_h, w: out_w });
        }
        let mut acc = vec![0.0f64; out_h * out_w];
        let mut weight = vec![0.0f64; out_h * out_w];
        let sy = out_h as f64 / self.height as f64;
        let sx = out_w as f64 / self.width as f64;
        for r in 0..self.height {
            // Distribute each source pixel over the output cells it covers.
            let y0 = r as f64 * sy;
            let y1 = (r + 1) as f64 * sy;
            for c in 0..self.width {
                let x0 = c as f64 * sx;
                let x1 = (c + 1) as f64 * sx;
                let v = if self.data[r * self.width + c] { 1.0 } else { 0.0 };
                let mut oy = y0.floor() as usize;
                while (oy as f64) < y1 && oy < out_h {
                    let cover_y = (y1.min((oy + 1) as f64) - y0.max(oy as f64)).max(0.0);
                    let mut ox = x0.floor() as usize;
                    while (ox as f64) < x1 && ox < out_w {
                        let cover_x = (x1.min((ox + 1) as f64) - x0.max(ox as f64)).max(0.0);
                        let idx = oy * out_w + ox;
                        acc[idx] += v * cover_y * cover_x;
                        weight[idx] += cover_y * cover_x;
                        ox += 1;
                    }
                    oy += 1;
                }
            }
        }
        let data = acc
            .iter()
            .zip(&weight)
            .map(|(a, w)| if *w > 0.0 { (a / w).clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        SoftMask::from_data(out_h, out_w, data)
    }
}

/// Dense probability mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SoftMask {
    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::ZeroExtent { h: height, w: width });
        }
        if data.len() != height * width {
            return Err(MaskError::BadLength { h: height, w: width, len: data.len() });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(MaskError::BadProbability { index, value });
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Binarize: a cell is foreground when its confidence is strictly
    /// greater than `t`.
    pub fn threshold(&self, t: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v > t).collect(),
        }
    }

    /// Bilinear upsample (or downsample) to a new resolution, treating cell
    /// centers as sample points and clamping at the borders.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<SoftMask, MaskError> {
        if out_h == 0 || out_w == 0 {
            return Err(MaskError::ZeroExtent { h: out_h, w: out_w });
        }
        let mut data = vec![0.0f64; out_h * out_w];
        for r in 0..out_h {
            let sy = ((r as f64 + 0.5) / out_h as f64) * self.height as f64 - 0.5;
            let y0 = sy.floor();
            let fy = sy - y0;
            let y0i = (y0 as isize).clamp(0, self.height as isize - 1) as usize;
            let y1i = ((y0 as isize) + 1).clamp(0, self.height as isize - 1) as usize;
            for c in 0..out_w {
                let sx = ((c as f64 + 0.5) / out_w as f64) * self.width as f64 - 0.5;
                let x0 = sx.floor();
                let fx = sx - x0;
                let x0i = (x0 as isize).clamp(0, self.width as isize - 1) as usize;
                let x1i = ((x0 as isize) + 1).clamp(0, self.width as isize - 1) as usize;
                let v00 = self.get(y0i, x0i);
                let v01 = self.get(y0i, x1i);
                let v10 = self.get(y1i, x0i);
                let v11 = self.get(y1i, x1i);
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                data[r * out_w + c] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
        SoftMask::from_data(out_h, out_w, data)
    }

    fn check_shape_binary(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.height != other.height || self.width != other.width {
            return Err(MaskError::ShapeMismatch {
                ah: self.height,
                aw: self.width,
                bh: other.height,
                bw: other.width,
            });
        }
        Ok(())
    }

    /// Soft IoU against a binary reference, useful for quick diagnostics.
    pub fn soft_iou(&self, gt: &BinaryMask) -> Result<f64, MaskError> {
        self.check_shape_binary(gt)?;
        let mut inter = 0.0;
        let mut union = 0.0;
        for (p, g) in self.data.iter().zip(gt.data()) {
            let g = if *g { 1.0 } else { 0.0 };
            inter += p * g;
            union += p + g - p * g;
        }
        if union <= 0.0 {
            return Ok(0.0);
        }
        Ok(inter / union)
    }
}

impl BinaryMask {
    fn check_shape(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.height != other.height || self.width != other.width {
            return Err(MaskError::ShapeMismatch {
                ah: self.height,
                aw: self.width,
                bh: other.height,
                bw: other.width,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from_str(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |r, c| rows[r].as_bytes()[c] == b'#').unwrap()
    }

    #[test]
    fn mask_iou_hand_case() {
        let a = mask_from_str(&["##..", "##..", "....", "...."]);
        let b = mask_from_str(&[".##.", ".##.", "....", "...."]);
        // Intersection 2 cells, union 6 cells.
        assert!((a.iou(&b).unwrap() - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn empty_masks_have_zero_iou() {
        let a = BinaryMask::new(4, 4).unwrap();
        let b = BinaryMask::new(4, 4).unwrap();
        assert_eq!(a.iou(&b).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = BinaryMask::new(4, 4).unwrap();
        let b = BinaryMask::new(4, 5).unwrap();
        assert!(matches!(a.iou(&b), Err(MaskError::ShapeMismatch { .. })));
    }

    #[test]
    fn tight_bbox_covers_pixels() {
        let m = mask_from_str(&["....", ".##.", ".##.", "...."]);
        let b = m.tight_bbox().unwrap();
        let c = b.to_corners();
        assert!((c.x1 - 0.25).abs() < 1e-12);
        assert!((c.y1 - 0.25).abs() < 1e-12);
        assert!((c.x2 - 0.75).abs() < 1e-12);
        assert!((c.y2 - 0.75).abs() < 1e-12);
        assert!(BinaryMask::new(3, 3).unwrap().tight_bbox().is_none());
    }

    #[test]
    fn threshold_is_strict() {
        let s = SoftMask::from_data(1, 3, vec![0.4, 0.5, 0.6]).unwrap();
        let b = s.threshold(0.5);
        assert_eq!(b.data(), &[false, false, true]);
    }

    #[test]
    fn soft_mask_rejects_out_of_range() {
        assert!(matches!(
            SoftMask::from_data(1, 2, vec![0.3, 1.2]),
            Err(MaskError::BadProbability { index: 1, .. })
        ));
    }

    #[test]
    fn area_downsample_averages_coverage() {
        let m = mask_from_str(&["##..", "##..", "....", "...."]);
        let s = m.area_downsample(2, 2).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 0), 0.0);
        assert_eq!(s.get(1, 1), 0.0);
    }

    #[test]
    fn resize_bilinear_identity() {
        let s = SoftMask::from_data(2, 2, vec![0.1, 0.9, 0.3, 0.7]).unwrap();
        let r = s.resize_bilinear(2, 2).unwrap();
        assert_eq!(s, r);
    }
}
