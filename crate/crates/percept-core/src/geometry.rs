//! Axis-aligned boxes in normalized image coordinates.
//!
//! Boxes are stored center-form `(cx, cy, w, h)` with every coordinate in
//! `[0, 1]`. Corner-form values are derived on demand and clamped back into
//! the unit square, so a box centered near the border never yields corners
//! outside the image.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box field {field} is {value}, expected a finite value in [0, 1]")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("box has non-positive extent w={w} h={h}")]
    Degenerate { w: f64, h: f64 },
    #[error("corners are not ordered: ({x1}, {y1}) .. ({x2}, {y2})")]
    UnorderedCorners { x1: f64, y1: f64, x2: f64, y2: f64 },
}

/// Center-form box, normalized to the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-form box `(x1, y1)` top-left, `(x2, y2)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

fn check_unit(field: &'static str, value: f64) -> Result<(), GeometryError> {
    if !value.is_finite() || !(0.0..=1.0).contains(&value) {
        return Err(GeometryError::OutOfRange { field, value });
    }
    Ok(())
}

impl BBox {
    /// Builds a validated box. Extents must be strictly positive and every
    /// field must lie in `[0, 1]`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        check_unit("cx", cx)?;
        check_unit("cy", cy)?;
        check_unit("w", w)?;
        check_unit("h", h)?;
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::Degenerate { w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Re-checks the invariants, for boxes that arrived through
    /// deserialization instead of [`BBox::new`].
    pub fn validate(&self) -> Result<(), GeometryError> {
        Self::new(self.cx, self.cy, self.w, self.h).map(|_| ())
    }

    /// Corner form, clamped to the unit square.
    pub fn to_corners(&self) -> Corners {
        Corners {
            x1: (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            y1: (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            x2: (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            y2: (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        }
    }

    /// Center form from corners. Corners are clamped to the unit square
    /// first; the result must still have positive extent.
    pub fn from_corners(c: Corners) -> Result<Self, GeometryError> {
        for (field, value) in [("x1", c.x1), ("y1", c.y1), ("x2", c.x2), ("y2", c.y2)] {
            if !value.is_finite() {
                return Err(GeometryError::OutOfRange { field, value });
            }
        }
        if c.x2 <= c.x1 || c.y2 <= c.y1 {
            return Err(GeometryError::UnorderedCorners {
                x1: c.x1,
                y1: c.y1,
                x2: c.x2,
                y2: c.y2,
            });
        }
        let x1 = c.x1.clamp(0.0, 1.0);
        let y1 = c.y1.clamp(0.0, 1.0);
        let x2 = c.x2.clamp(0.0, 1.0);
        let y2 = c.y2.clamp(0.0, 1.0);
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn area(&self) -> f64 {
        let c = self.to_corners();
        (c.x2 - c.x1) * (c.y2 - c.y1)
    }

    /// Intersection-over-union with another box. Always in `[0, 1]`.
    pub fn iou(&self, other: &BBox) -> f64 {
        box_iou(self, other)
    }
}

/// Intersection-over-union of two boxes, computed on clamped corners.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ca = a.to_corners();
    let cb = b.to_corners();
    let iw = (ca.x2.min(cb.x2) - ca.x1.max(cb.x1)).max(0.0);
    let ih = (ca.y2.min(cb.y2) - ca.y1.max(cb.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}
