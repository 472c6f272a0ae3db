//! Ground-truth annotations and labeled images.
//!
//! An [`Annotation`] ties a label to a mask; its box is always the tight
//! bounding box of the mask, computed at construction so the two can never
//! drift apart. Labels are either a category index (word-style supervision)
//! or a free-form phrase (sentence-style supervision).

use crate::geometry::{BBox, GeometryError};
use crate::image::RasterImage;
use crate::mask::{BinaryMask, MaskError};
use crate::rle::{rle_decode, rle_encode, RleError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A labeled image may carry at most this many reference captions.
pub const MAX_CAPTIONS: usize = 4;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("annotation mask is empty; a target must cover at least one pixel")]
    EmptyMask,
    #[error("stored box {stored:?} does not match the mask tight box {tight:?}")]
    BoxMaskMismatch { stored: BBox, tight: BBox },
    #[error("image {id:?} has {got} captions, the maximum is {MAX_CAPTIONS}")]
    TooManyCaptions { id: String, got: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Rle(#[from] RleError),
}

/// What an annotation denotes: a closed-set category or an open phrase.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Category(u32),
    Phrase(String),
}

/// One target: label + mask, with the tight box cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnnotationWire", into = "AnnotationWire")]
pub struct Annotation {
    label: Label,
    bbox: BBox,
    mask: BinaryMask,
    is_thing: bool,
}

#[derive(Serialize, Deserialize)]
struct AnnotationWire {
    label: Label,
    bbox: BBox,
    mask_rle: String,
    mask_height: usize,
    mask_width: usize,
    is_thing: bool,
}

impl From<Annotation> for AnnotationWire {
    fn from(a: Annotation) -> Self {
        AnnotationWire {
            label: a.label,
            bbox: a.bbox,
            mask_rle: rle_encode(&a.mask),
            mask_height: a.mask.height(),
            mask_width: a.mask.width(),
            is_thing: a.is_thing,
        }
    }
}

impl TryFrom<AnnotationWire> for Annotation {
    type Error = AnnotationError;

    fn try_from(w: AnnotationWire) -> Result<Self, AnnotationError> {
        let mask = rle_decode(&w.mask_rle, w.mask_height, w.mask_width)?;
        let ann = Annotation::from_mask(w.label, mask, w.is_thing)?;
        // The wire box is redundant; verify it instead of trusting it.
        let stored = w.bbox;
        let tight = ann.bbox;
        let close = (stored.cx - tight.cx).abs() < 1e-9
            && (stored.cy - tight.cy).abs() < 1e-9
            && (stored.w - tight.w).abs() < 1e-9
            && (stored.h - tight.h).abs() < 1e-9;
        if !close {
            return Err(AnnotationError::BoxMaskMismatch { stored, tight });
        }
        Ok(ann)
    }
}

impl Annotation {
    /// Builds an annotation from a non-empty mask; the box is derived.
    pub fn from_mask(label: Label, mask: BinaryMask, is_thing: bool) -> Result<Self, AnnotationError> {
        let bbox = mask.tight_bbox().ok_or(AnnotationError::EmptyMask)?;
        Ok(Self { label, bbox, mask, is_thing })
    }

    pub fn label(&self) -> &Label {
        &self.label
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn is_thing(&self) -> bool {
        self.is_thing
    }

    /// Returns the same target with a different label (used when projecting
    /// category annotations into phrase space).
    pub fn with_label(&self, label: Label) -> Self {
        Self { label, ..self.clone() }
    }
}

/// An image plus its targets and up to [`MAX_CAPTIONS`] reference captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: String,
    pub image: RasterImage,
    pub annotations: Vec<Annotation>,
    captions: Vec<String>,
}

impl LabeledImage {
    pub fn new(id: String, image: RasterImage, annotations: Vec<Annotation>) -> Self {
        Self { id, image, annotations, captions: Vec::new() }
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }

    /// Replaces the caption set, enforcing the cap.
    pub fn set_captions(&mut self, captions: Vec<String>) -> Result<(), AnnotationError> {
        if captions.len() > MAX_CAPTIONS {
            return Err(AnnotationError::TooManyCaptions { id: self.id.clone(), got: captions.len() });
        }
        self.captions = captions;
        Ok(())
    }

    /// Re-checks every invariant after deserialization.
    pub fn validate(&self) -> Result<(), AnnotationError> {
        if self.captions.len() > MAX_CAPTIONS {
            return Err(AnnotationError::TooManyCaptions {
                id: self.id.clone(),
                got: self.captions.len(),
            });
        }
        for ann in &self.annotations {
            let tight = ann.mask.tight_bbox().ok_or(AnnotationError::EmptyMask)?;
            if (tight.cx - ann.bbox.cx).abs() > 1e-9 || (tight.w - ann.bbox.w).abs() > 1e-9 {
                return Err(AnnotationError::BoxMaskMismatch { stored: ann.bbox, tight });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_mask() -> BinaryMask {
        BinaryMask::from_fn(4, 4, |r, c| (1..3).contains(&r) && (1..3).contains(&c)).unwrap()
    }

    #[test]
    fn box_is_derived_from_mask() {
        let a = Annotation::from_mask(Label::Category(2), sample_mask(), true).unwrap();
        let c = a.bbox().to_corners();
        assert!((c.x1 - 0.25).abs() < 1e-12 && (c.y2 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let empty = BinaryMask::new(4, 4).unwrap();
        assert!(matches!(
            Annotation::from_mask(Label::Category(0), empty, true),
            Err(AnnotationError::EmptyMask)
        ));
    }

    #[test]
    fn annotation_serde_round_trip() {
        let a = Annotation::from_mask(Label::Phrase("the red square".into()), sample_mask(), true)
            .unwrap();
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.contains("mask_rle"));
        let back: Annotation = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn label_serde_is_untagged() {
        assert_eq!(serde_json::to_string(&Label::Category(3)).unwrap(), "3");
        assert_eq!(
            serde_json::to_string(&Label::Phrase("sky".into())).unwrap(),
            "\"sky\""
        );
    }

    #[test]
    fn caption_cap_enforced() {
        let img = RasterImage::filled(4, 4, [0, 0, 0]).unwrap();
        let mut li = LabeledImage::new("img0".into(), img, vec![]);
        let five = (0..5).map(|i| format!("caption {i}")).collect();
        assert!(matches!(
            li.set_captions(five),
            Err(AnnotationError::TooManyCaptions { got: 5, .. })
        ));
        li.set_captions(vec!["one".into(), "two".into()]).unwrap();
        assert_eq!(li.captions().len(), 2);
    }
}
