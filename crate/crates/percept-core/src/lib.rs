//! Shared primitives for the perception stack: boxes, masks, run-length
//! encoding, raster images, and labeled annotations.
//!
//! Everything here is plain data with explicit validation. Coordinates are
//! normalized to `[0, 1]` so downstream code never has to care about pixel
//! resolutions until rasterization time.

pub mod annotation;
pub mod geometry;
pub mod image;
pub mod mask;
pub mod rle;

pub use annotation::{Annotation, AnnotationError, Label, LabeledImage};
pub use geometry::{box_iou, BBox, Corners, GeometryError};
pub use image::{ImageError, RasterImage};
pub use mask::{BinaryMask, MaskError, SoftMask};
pub use rle::{rle_decode, rle_encode, RleError};
