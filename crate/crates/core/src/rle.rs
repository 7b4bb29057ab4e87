//! Run-length encoding of square masks.
//!
//! Pixels are visited row-major. `counts` alternates background and
//! foreground run lengths and always starts with background, so a mask
//! whose first pixel is foreground begins with a zero.

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    /// Side length of the mask.
    pub size: usize,
    pub counts: Vec<u32>,
}

pub fn encode_rle(mask: &Mask) -> MaskRle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in mask.bits() {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    MaskRle { size: mask.size(), counts }
}

pub fn decode_rle(rle: &MaskRle) -> Result<Mask> {
    let total = rle.size * rle.size;
    let mut bits = Vec::with_capacity(total);
    for (i, &c) in rle.counts.iter().enumerate() {
        if i > 0 && c == 0 {
            return Err(Error::invalid(format!("run {i} has zero length")));
        }
        if bits.len() + c as usize > total {
            return Err(Error::invalid(format!("runs exceed {total} pixels")));
        }
        bits.extend(std::iter::repeat(i % 2 == 1).take(c as usize));
    }
    if bits.len() != total {
        return Err(Error::invalid(format!("runs cover {} of {total} pixels", bits.len())));
    }
    Mask::from_bits(rle.size, bits)
}
