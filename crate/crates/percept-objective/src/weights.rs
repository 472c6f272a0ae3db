//! Composite-loss weights.

use crate::ObjectiveError;

/// Weights for the composite training loss. The defaults are the training
/// recipe values: word/sentence classification 2, box L1 5, box GIoU 2,
/// mask BCE 5, mask Dice 5, and the next-token term entering unweighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub word: f64,
    pub sent: f64,
    pub l1: f64,
    pub giou: f64,
    pub bce: f64,
    pub dice: f64,
    pub llm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { word: 2.0, sent: 2.0, l1: 5.0, giou: 2.0, bce: 5.0, dice: 5.0, llm: 1.0 }
    }
}

impl LossWeights {
    /// Every weight must be finite and non-negative.
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (name, value) in [
            ("word", self.word),
            ("sent", self.sent),
            ("l1", self.l1),
            ("giou", self.giou),
            ("bce", self.bce),
            ("dice", self.dice),
            ("llm", self.llm),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(ObjectiveError::BadWeight { name, value });
            }
        }
        Ok(())
    }
}
