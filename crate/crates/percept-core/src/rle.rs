//! Run-length encoding for binary masks.
//!
//! The wire form is a comma-separated list of run lengths in row-major scan
//! order. Runs alternate background/foreground and the list always starts
//! with a background run, so a mask whose first pixel is foreground encodes
//! with a leading `0`. Dimensions travel separately (masks do not embed their
//! shape in the string).

use crate::mask::{BinaryMask, MaskError};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RleError {
    #[error("run #{index} ({text:?}) is not an unsigned integer")]
    BadRun { index: usize, text: String },
    #[error("run #{index} is zero; only the leading background run may be zero")]
    ZeroRun { index: usize },
    #[error("runs sum to {sum} but the mask has {expected} cells")]
    LengthMismatch { sum: usize, expected: usize },
    #[error("empty run list")]
    Empty,
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Encodes a mask as alternating background/foreground run lengths.
pub fn rle_encode(mask: &BinaryMask) -> String {
    let mut runs: Vec<usize> = Vec::new();
    let mut current = false; // encoding starts in background
    let mut count = 0usize;
    for &bit in mask.data() {
        if bit == current {
            count += 1;
        } else {
            runs.push(count);
            current = bit;
            count = 1;
        }
    }
    runs.push(count);
    runs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Decodes run lengths back into a mask of the given shape.
///
/// # Errors
///
/// Rejects non-numeric runs, zero-length runs anywhere but the leading
/// position, and run sums that do not cover exactly `height * width` cells.
pub fn rle_decode(runs: &str, height: usize, width: usize) -> Result<BinaryMask, RleError> {
    let trimmed = runs.trim();
    if trimmed.is_empty() {
        return Err(RleError::Empty);
    }
    let mut data = Vec::with_capacity(height * width);
    let mut bit = false;
    for (index, part) in trimmed.split(',').enumerate() {
        let n: usize = part
            .trim()
            .parse()
            .map_err(|_| RleError::BadRun { index, text: part.to_string() })?;
        if n == 0 && index != 0 {
            return Err(RleError::ZeroRun { index });
        }
        data.extend(std::iter::repeat(bit).take(n));
        bit = !bit;
    }
    if data.len() != height * width {
        return Err(RleError::LengthMismatch { sum: data.len(), expected: height * width });
    }
    Ok(BinaryMask::from_data(height, width, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leading_zero_run_for_foreground_start() {
        let m = BinaryMask::from_fn(2, 2, |r, c| (r, c) != (1, 1)).unwrap();
        assert_eq!(rle_encode(&m), "0,3,1");
    }

    #[test]
    fn all_background_and_all_foreground() {
        let bg = BinaryMask::new(2, 3).unwrap();
        assert_eq!(rle_encode(&bg), "6");
        let fg = BinaryMask::from_fn(2, 3, |_, _| true).unwrap();
        assert_eq!(rle_encode(&fg), "0,6");
    }

    #[test]
    fn decode_rejects_bad_input() {
        assert!(matches!(rle_decode("1,x,2", 2, 2), Err(RleError::BadRun { index: 1, .. })));
        assert!(matches!(rle_decode("1,0,3", 2, 2), Err(RleError::ZeroRun { index: 1 })));
        assert!(matches!(
            rle_decode("3", 2, 2),
            Err(RleError::LengthMismatch { sum: 3, expected: 4 })
        ));
        assert!(matches!(rle_decode("  ", 2, 2), Err(RleError::Empty)));
    }

    #[test]
    fn round_trip_small() {
        let m = BinaryMask::from_fn(3, 5, |r, c| (r * 5 + c) % 3 == 0).unwrap();
        let encoded = rle_encode(&m);
        let decoded = rle_decode(&encoded, 3, 5).unwrap();
        assert_eq!(m, decoded);
    }
}
