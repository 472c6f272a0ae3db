//! Model hyperparameters. The `toy` preset exercises every interface at a
//! size a laptop CPU handles in unit tests; `desk` shrinks further for the
//! training-loop budget. Either way the architecture is identical.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Images are resized so the longer side matches this and padded square.
    pub image_side: usize,
    /// Vision feature width (all pyramid levels).
    pub d_vis: usize,
    /// Language-model hidden width.
    pub d_lm: usize,
    /// Decoder query width.
    pub d_dec: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    /// Hard cap on LM sequence length (visual prefix + text).
    pub context_cap: usize,
    /// Dynamically selected queries.
    pub num_queries: usize,
    /// Extra learnable queries for stuff regions (panoptic mode only).
    pub num_stuff_queries: usize,
    /// `false` swaps dynamic selection for a fully learnable query bank.
    pub query_selection: bool,
    pub decoder_layers: usize,
    /// Deformable sampling points per pyramid level.
    pub sampling_points: usize,
    pub decoder_heads: usize,
    /// Capacity of the denoising label-embedding table (max labels per sample).
    pub max_labels: usize,
    pub ffn_mult: usize,
}

impl ModelConfig {
    /// Reference configuration: 128-px images, 64/128-dim features, matching
    /// the documented defaults (100 + 100 queries, 3 decoder layers, 4
    /// sampling points).
    pub fn toy() -> Self {
        Self {
            image_side: 128,
            d_vis: 64,
            d_lm: 128,
            d_dec: 64,
            lm_layers: 2,
            lm_heads: 4,
            context_cap: 160,
            num_queries: 100,
            num_stuff_queries: 100,
            query_selection: true,
            decoder_layers: 3,
            sampling_points: 4,
            decoder_heads: 4,
            max_labels: 32,
            ffn_mult: 4,
        }
    }

    /// Small preset for the CPU training loop: same architecture, smaller
    /// widths and query counts.
    pub fn desk() -> Self {
        Self {
            image_side: 64,
            d_vis: 32,
            d_lm: 64,
            d_dec: 32,
            lm_layers: 2,
            lm_heads: 4,
            context_cap: 160,
            num_queries: 12,
            num_stuff_queries: 4,
            query_selection: true,
            decoder_layers: 3,
            sampling_points: 4,
            decoder_heads: 4,
            max_labels: 16,
            ffn_mult: 2,
        }
    }

    /// Side length of the stride-4 pixel-embedding map.
    pub fn pixel_side(&self) -> usize {
        self.image_side / 4
    }

    /// Pyramid level sides at strides 8, 16, 32.
    pub fn level_sides(&self) -> [usize; 3] {
        [self.image_side / 8, self.image_side / 16, self.image_side / 32]
    }

    /// Total pyramid cells across the three levels.
    pub fn total_cells(&self) -> usize {
        self.level_sides().iter().map(|s| s * s).sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.image_side % 32 != 0 || self.image_side == 0 {
            return Err(format!("image_side {} must be a positive multiple of 32", self.image_side));
        }
        if self.d_lm % self.lm_heads != 0 {
            return Err(format!("d_lm {} not divisible by lm_heads {}", self.d_lm, self.lm_heads));
        }
        if self.d_dec % self.decoder_heads != 0 {
            return Err(format!(
                "d_dec {} not divisible by decoder_heads {}",
                self.d_dec, self.decoder_heads
            ));
        }
        if self.num_queries == 0 {
            return Err("num_queries must be positive".into());
        }
        if self.num_queries > self.total_cells() {
            return Err(format!(
                "num_queries {} exceeds the {} pyramid cells available for selection",
                self.num_queries,
                self.total_cells()
            ));
        }
        if self.decoder_layers == 0 {
            return Err("decoder_layers must be positive".into());
        }
        Ok(())
    }
}
