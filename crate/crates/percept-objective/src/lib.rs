//! Set-prediction training objective: optimal bipartite matching between
//! predicted queries and annotated instances, and the composite loss that
//! supervises every decoder layer (classification, box regression, mask
//! quality) plus the language-model next-token term.
//!
//! The matching step works on detached prediction values (plain `f64`), so
//! no gradient flows through the assignment itself; the chosen pairs then
//! drive differentiable loss terms built on the autograd tape.

mod cost;
mod hungarian;
mod loss;
mod scalar;
mod weights;

pub use cost::{cost_matrix, TargetInstance};
pub use hungarian::{hungarian, MatchResult};
pub use loss::{
    box_regression_terms, classification_loss, mask_quality_terms, total_loss, BoxTerms,
    LossReport, LossTerm, MaskTerms, SampleLoss,
};
pub use weights::LossWeights;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("cost matrix entry ({row}, {col}) is not finite: {value}")]
    NonFiniteCost { row: usize, col: usize, value: f64 },
    #[error("target label {label} out of range for {classes} instruction labels")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("target mask is {got_h}x{got_w}, prediction grid is {expected}x{expected}")]
    MaskGridMismatch { expected: usize, got_h: usize, got_w: usize },
    #[error("{context}: expected {expected}, got {got}")]
    CountMismatch { context: &'static str, expected: usize, got: usize },
    #[error("loss weight {name} is {value}, must be finite and >= 0")]
    BadWeight { name: &'static str, value: f64 },
}
