//! Convolutional feature pyramid and vision-to-language connector.
//!
//! Images are resized so the longer side matches the configured square
//! side (shorter side padded), then five stride-2 convolutions produce
//! grids at strides 8, 16, and 32 plus a stride-4 tap that feeds a fused
//! per-pixel embedding map used by the mask head.

use crate::model::{Model, ModelError};
use percept_autograd::{Graph, NodeId, Tensor};
use percept_core::RasterImage;

/// One forward pass worth of visual features, as graph nodes.
pub struct EncodedImage {
    /// Grids at strides 8, 16, 32; each `[side_l^2, d_vis]`, row-major cells.
    pub levels: Vec<NodeId>,
    /// Side length (cells) of each level grid.
    pub level_sides: Vec<usize>,
    /// Fused per-pixel embedding map at stride 4, `[pixel_side^2, d_dec]`.
    pub pixel: NodeId,
    pub pixel_side: usize,
}

/// Normalized half-pixel cell centers of a `side x side` grid, `[side^2, 2]`
/// rows of `(x, y)`, row-major.
pub fn grid_centers(side: usize) -> Tensor {
    let mut t = Tensor::zeros(side * side, 2);
    for y in 0..side {
        for x in 0..side {
            t.set(y * side + x, 0, (x as f64 + 0.5) / side as f64);
            t.set(y * side + x, 1, (y as f64 + 0.5) / side as f64);
        }
    }
    t
}

impl Model {
    /// 3x3 stride-2 convolution (pad 1) expressed as im2col + linear, with a
    /// GELU: `[side^2, c_in]` -> `[(side/2)^2, c_out]`.
    fn conv_block(&self, g: &mut Graph, x: NodeId, side: usize, name: &str) -> NodeId {
        let cols = g.im2col(x, side, side, 3, 3, 2, 1);
        let lin = self.linear_named(g, cols, name);
        g.gelu(lin)
    }

    /// Runs the vision pyramid. The input may have any aspect ratio; it is
    /// resized (longer side to `image_side`, shorter padded) first.
    pub fn encode_image(&self, g: &mut Graph, image: &RasterImage) -> Result<EncodedImage, ModelError> {
        let side = self.config.image_side;
        let resized = image.resize_longer_pad(side)?;
        let mut rgb = Tensor::zeros(side * side, 3);
        for y in 0..side {
            for x in 0..side {
                let p = resized.pixel_f64(y, x);
                for ch in 0..3 {
                    rgb.set(y * side + x, ch, p[ch]);
                }
            }
        }
        let input = g.constant(rgb);

        let s2 = self.conv_block(g, input, side, "enc.stem1"); // stride 2
        let s4 = self.conv_block(g, s2, side / 2, "enc.stem2"); // stride 4
        let s8 = self.conv_block(g, s4, side / 4, "enc.stem3"); // stride 8
        let s16 = self.conv_block(g, s8, side / 8, "enc.lvl16"); // stride 16
        let s32 = self.conv_block(g, s16, side / 16, "enc.lvl32"); // stride 32

        // Pixel map: project the stride-4 tap, add a bilinear upsampling of
        // the stride-8 grid, and normalize.
        let pixel_side = self.config.pixel_side();
        let from4 = self.linear_named(g, s4, "enc.pix_from4");
        let up_pos = g.constant(grid_centers(pixel_side));
        let up8 = g.bilinear_sample(s8, side / 8, side / 8, up_pos);
        let from8 = self.linear_named(g, up8, "enc.pix_from8");
        let fused = g.add(from4, from8);
        let pixel = self.norm_named(g, fused, "enc.pix_norm");

        Ok(EncodedImage {
            levels: vec![s8, s16, s32],
            level_sides: self.config.level_sides().to_vec(),
            pixel,
            pixel_side,
        })
    }

    /// Projects the coarsest pyramid level into LM token space: one visual
    /// token per coarsest cell.
    pub fn connect(&self, g: &mut Graph, encoded: &EncodedImage) -> NodeId {
        let coarse = *encoded.levels.last().expect("three pyramid levels");
        self.linear_named(g, coarse, "conn")
    }

    /// Number of visual tokens [`Model::connect`] produces.
    pub fn num_visual_tokens(&self) -> usize {
        let s = *self.config.level_sides().last().expect("three pyramid levels");
        s * s
    }
}
