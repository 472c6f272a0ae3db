//! Evaluation metrics for multi-granular perception, plus a seeded synthetic
//! benchmark generator used for end-to-end training and evaluation tests.
//!
//! Metrics covered:
//! - panoptic quality (PQ/SQ/RQ) over joint category+instance maps;
//! - mean IoU over semantic classes;
//! - cumulative IoU over a stream of mask pairs (grounding-style);
//! - box accuracy at an IoU threshold (referring-comprehension-style).

pub mod panoptic;
pub mod scalar;
pub mod synth;

pub use panoptic::{panoptic_quality, ClassPq, MetricError, PanopticScene, PqReport, VOID};
pub use scalar::{box_accuracy, mean_iou, CumulativeIou};
pub use synth::{
    synth_generate, CategoryDef, ReferringExpr, SynthDataset, SynthError, SynthImage, SynthSpec,
    STUFF_CLASSES, THING_COLORS, THING_SHAPES,
};
