//! Column-major run-length codec for binary masks.
//!
//! Counts alternate zero-run, one-run, zero-run, ... and always start with a
//! zero-run, which is `0` when the first pixel (top-left) is set.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub counts: Vec<u64>,
    /// `(H, W)`
    pub shape: (usize, usize),
}

/// Encodes a 0/1 mask. Any other value is rejected with its position.
pub fn rle_encode(mask: ArrayView2<u8>) -> Result<RleMask> {
    let (h, w) = mask.dim();
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = mask[[y, x]];
            if v > 1 {
                return Err(Error::NonBinary {
                    value: v as f64,
                    position: format!("(row {y}, col {x})"),
                });
            }
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Ok(RleMask {
        counts,
        shape: (h, w),
    })
}

/// Encodes a boolean mask; cannot fail.
pub fn rle_encode_bool(mask: ArrayView2<bool>) -> RleMask {
    rle_encode(mask.mapv(u8::from).view()).expect("boolean masks are binary")
}

/// Decodes to a 0/1 mask; the exact inverse of [`rle_encode`].
pub fn rle_decode(rle: &RleMask) -> Result<Array2<u8>> {
    let (h, w) = rle.shape;
    let expected = (h * w) as u64;
    let sum: u64 = rle.counts.iter().sum();
    if sum != expected {
        return Err(Error::MalformedRle { sum, expected });
    }
    let mut out = Array2::<u8>::zeros((h, w));
    let mut idx = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let v = (i % 2) as u8;
        for k in idx..idx + c as usize {
            out[[k % h, k / h]] = v;
        }
        idx += c as usize;
    }
    Ok(out)
}

pub fn rle_decode_bool(rle: &RleMask) -> Result<Array2<bool>> {
    Ok(rle_decode(rle)?.mapv(|v| v == 1))
}
