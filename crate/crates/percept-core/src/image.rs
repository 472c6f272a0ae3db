//! RGB raster images.
//!
//! Pixels are 8-bit RGB in row-major order. Serialization uses base64 of the
//! raw byte buffer so labeled datasets can travel as JSON lines without
//! external image files.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("image has zero extent: {h}x{w}")]
    ZeroExtent { h: usize, w: usize },
    #[error("buffer length {len} does not match {h}x{w} RGB ({expected} bytes)")]
    BadLength { h: usize, w: usize, len: usize, expected: usize },
    #[error("expected 3 channels (RGB), got {channels}")]
    NotRgb { channels: usize },
    #[error("invalid base64 pixel payload: {0}")]
    BadBase64(String),
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RasterImageWire", into = "RasterImageWire")]
pub struct RasterImage {
    height: usize,
    width: usize,
    rgb: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct RasterImageWire {
    height: usize,
    width: usize,
    rgb_b64: String,
}

impl From<RasterImage> for RasterImageWire {
    fn from(img: RasterImage) -> Self {
        RasterImageWire {
            height: img.height,
            width: img.width,
            rgb_b64: B64.encode(&img.rgb),
        }
    }
}

impl TryFrom<RasterImageWire> for RasterImage {
    type Error = ImageError;

    fn try_from(wire: RasterImageWire) -> Result<Self, ImageError> {
        let rgb = B64
            .decode(wire.rgb_b64.as_bytes())
            .map_err(|e| ImageError::BadBase64(e.to_string()))?;
        RasterImage::from_rgb(wire.height, wire.width, rgb)
    }
}

impl RasterImage {
    /// Solid-color image.
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::ZeroExtent { h: height, w: width });
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Ok(Self { height, width, rgb: data })
    }

    pub fn from_rgb(height: usize, width: usize, rgb: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::ZeroExtent { h: height, w: width });
        }
        let expected = height * width * 3;
        if rgb.len() != expected {
            return Err(ImageError::BadLength { h: height, w: width, len: rgb.len(), expected });
        }
        Ok(Self { height, width, rgb })
    }

    /// Validates a flat buffer with an explicit channel count; anything but
    /// 3 channels is rejected.
    pub fn from_flat(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, ImageError> {
        if channels != 3 {
            return Err(ImageError::NotRgb { channels });
        }
        Self::from_rgb(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bytes(&self) -> &[u8] {
        &self.rgb
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.rgb[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel scaled to `[0, 1]` floats, the form the encoder consumes.
    pub fn pixel_f64(&self, row: usize, col: usize) -> [f64; 3] {
        let p = self.pixel(row, col);
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    }

    /// Scales so the longer side equals `side` (bilinear), then pads the
    /// bottom/right with black to a `side x side` square.
    pub fn resize_longer_pad(&self, side: usize) -> Result<RasterImage, ImageError> {
        if side == 0 {
            return Err(ImageError::ZeroExtent { h: side, w: side });
        }
        let scale = side as f64 / self.height.max(self.width) as f64;
        let new_h = ((self.height as f64 * scale).round() as usize).clamp(1, side);
        let new_w = ((self.width as f64 * scale).round() as usize).clamp(1, side);
        let mut out = RasterImage::filled(side, side, [0, 0, 0])?;
        for r in 0..new_h {
            let sy = ((r as f64 + 0.5) / new_h as f64) * self.height as f64 - 0.5;
            let y0 = sy.floor();
            let fy = sy - y0;
            let y0i = (y0 as isize).clamp(0, self.height as isize - 1) as usize;
            let y1i = ((y0 as isize) + 1).clamp(0, self.height as isize - 1) as usize;
            for c in 0..new_w {
                let sx = ((c as f64 + 0.5) / new_w as f64) * self.width as f64 - 0.5;
                let x0 = sx.floor();
                let fx = sx - x0;
                let x0i = (x0 as isize).clamp(0, self.width as isize - 1) as usize;
                let x1i = ((x0 as isize) + 1).clamp(0, self.width as isize - 1) as usize;
                let mut px = [0u8; 3];
                for ch in 0..3 {
                    let v00 = self.pixel(y0i, x0i)[ch] as f64;
                    let v01 = self.pixel(y0i, x1i)[ch] as f64;
                    let v10 = self.pixel(y1i, x0i)[ch] as f64;
                    let v11 = self.pixel(y1i, x1i)[ch] as f64;
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    px[ch] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
                }
                out.set_pixel(r, c, px);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_flat_rejects_non_rgb() {
        assert!(matches!(
            RasterImage::from_flat(2, 2, 4, vec![0; 16]),
            Err(ImageError::NotRgb { channels: 4 })
        ));
    }

    #[test]
    fn resize_longer_pad_shapes() {
        let img = RasterImage::filled(6, 12, [10, 20, 30]).unwrap();
        let out = img.resize_longer_pad(8).unwrap();
        assert_eq!(out.height(), 8);
        assert_eq!(out.width(), 8);
        // Content occupies the top 4 rows (6 * 8/12 = 4); below is padding.
        assert_eq!(out.pixel(0, 0), [10, 20, 30]);
        assert_eq!(out.pixel(5, 0), [0, 0, 0]);
    }

    #[test]
    fn serde_round_trip() {
        let mut img = RasterImage::filled(2, 3, [1, 2, 3]).unwrap();
        img.set_pixel(1, 2, [9, 8, 7]);
        let json = serde_json::to_string(&img).unwrap();
        let back: RasterImage = serde_json::from_str(&json).unwrap();
        assert_eq!(img, back);
    }
}
