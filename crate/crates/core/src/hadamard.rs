//! Fast Walsh–Hadamard transform and the power-of-two padding geometry used by
//! every Fastfood block.
//!
//! The transform is unnormalized: `H_1 = [1]`, `H_2d = [[H_d, H_d], [H_d, -H_d]]`,
//! so applying it twice multiplies a vector by its length.

use crate::error::{Error, Result};

/// Shape of one group's Fastfood projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadGeometry {
    /// Input dimension before padding.
    pub d_in: usize,
    /// Smallest power of two `>= d_in`.
    pub d_pad: usize,
    /// Number of stacked `d_pad`-sized blocks.
    pub blocks: usize,
}

impl PadGeometry {
    pub fn new(d_in: usize, m_per_group: usize) -> Result<Self> {
        if d_in == 0 || m_per_group == 0 {
            return Err(Error::InvalidDimension(format!(
                "padding geometry needs positive sizes, got d_in={d_in}, m={m_per_group}"
            )));
        }
        let d_pad = d_in.next_power_of_two();
        Ok(Self {
            d_in,
            d_pad,
            blocks: m_per_group.div_ceil(d_pad),
        })
    }

    /// Total number of projection rows, `blocks * d_pad`.
    pub fn rows(&self) -> usize {
        self.blocks * self.d_pad
    }
}

pub fn pad_geometry(d_in: usize, m_per_group: usize) -> Result<PadGeometry> {
    PadGeometry::new(d_in, m_per_group)
}

/// In-place unnormalized Walsh–Hadamard transform.
pub fn fwht_inplace(v: &mut [f64]) -> Result<()> {
    if !v.len().is_power_of_two() {
        return Err(Error::InvalidDimension(format!(
            "Walsh-Hadamard length {} is not a power of two",
            v.len()
        )));
    }
    fwht_unchecked(v);
    Ok(())
}

/// Butterfly loop; caller guarantees a power-of-two length.
pub(crate) fn fwht_unchecked(v: &mut [f64]) {
    let n = v.len();
    let mut half = 1;
    while half < n {
        for chunk in v.chunks_exact_mut(2 * half) {
            let (lo, hi) = chunk.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        half *= 2;
    }
}
