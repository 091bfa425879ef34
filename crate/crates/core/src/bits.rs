//! Bit-packed sign tensors and XNOR/popcount arithmetic.
//!
//! A set bit encodes `+1`, a clear bit encodes `-1`. Bits are packed along
//! the innermost logical axis, one row per index of the outer three axes,
//! into 64-bit words. Trailing bits of each row's last word are always clear
//! and are masked out of every popcount.

use crate::error::{contract, Result};
use crate::tensor::{numel, Shape, Tensor};

pub const WORD_BITS: usize = 64;

#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask of valid bits in the last word of a row of `bits` logical bits.
#[inline]
pub fn tail_mask(bits: usize) -> u64 {
    match bits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    logical_shape: Shape,
    row_bits: usize,
    words_per_row: usize,
    tail_mask: u64,
    words: Vec<u64>,
}

impl BitTensor {
    /// All-`-1` tensor (every logical bit clear).
    pub fn negative_ones(logical_shape: Shape) -> Self {
        let row_bits = logical_shape[3];
        let words_per_row = words_for(row_bits);
        let rows = logical_shape[0] * logical_shape[1] * logical_shape[2];
        BitTensor {
            logical_shape,
            row_bits,
            words_per_row,
            tail_mask: tail_mask(row_bits),
            words: vec![0; rows * words_per_row],
        }
    }

    pub fn logical_shape(&self) -> Shape {
        self.logical_shape
    }

    pub fn rows(&self) -> usize {
        self.logical_shape[0] * self.logical_shape[1] * self.logical_shape[2]
    }

    pub fn row_bits(&self) -> usize {
        self.row_bits
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn pad_mask(&self) -> u64 {
        self.tail_mask
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    #[inline]
    pub fn set(&mut self, row: usize, bit: usize, positive: bool) {
        let w = row * self.words_per_row + bit / WORD_BITS;
        let m = 1u64 << (bit % WORD_BITS);
        if positive {
            self.words[w] |= m;
        } else {
            self.words[w] &= !m;
        }
    }

    #[inline]
    pub fn get(&self, row: usize, bit: usize) -> bool {
        let w = row * self.words_per_row + bit / WORD_BITS;
        self.words[w] >> (bit % WORD_BITS) & 1 == 1
    }

    /// Count of set bits among the logical bits of a row.
    pub fn row_popcount(&self, r: usize) -> u32 {
        popcount_masked(self.row(r), self.tail_mask)
    }

    /// Decode back to a `±1` float tensor.
    pub fn unpack(&self) -> Tensor {
        let mut data = Vec::with_capacity(numel(&self.logical_shape));
        for r in 0..self.rows() {
            for b in 0..self.row_bits {
                data.push(if self.get(r, b) { 1.0 } else { -1.0 });
            }
        }
        Tensor::new(self.logical_shape, data).expect("shape consistent by construction")
    }
}

/// Packs the sign pattern of `t` (`bit = 1` iff `t[i] >= 0`).
pub fn pack_signs(t: &Tensor) -> BitTensor {
    let mut out = BitTensor::negative_ones(t.shape());
    let row_bits = out.row_bits;
    let wpr = out.words_per_row;
    for (r, chunk) in t.data().chunks(row_bits.max(1)).enumerate() {
        if row_bits == 0 {
            break;
        }
        let dst = &mut out.words[r * wpr..(r + 1) * wpr];
        for (i, &v) in chunk.iter().enumerate() {
            if v >= 0.0 {
                dst[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
            }
        }
    }
    out
}

fn popcount_masked(row: &[u64], tail: u64) -> u32 {
    match row.split_last() {
        None => 0,
        Some((last, head)) => {
            head.iter().map(|w| w.count_ones()).sum::<u32>() + (last & tail).count_ones()
        }
    }
}

/// Dot product of the `±1` vectors encoded by two packed rows of `n` logical
/// bits: `n - 2 * popcount(a XOR b)`.
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], n: usize) -> Result<i64> {
    let words = words_for(n);
    if a.len() != words || b.len() != words {
        return Err(contract(format!(
            "bit rows of {} and {} words do not hold {} logical bits ({} words)",
            a.len(),
            b.len(),
            n,
            words
        )));
    }
    Ok(xnor_dot_unchecked(a, b, n))
}

#[inline]
pub(crate) fn xnor_dot_unchecked(a: &[u64], b: &[u64], n: usize) -> i64 {
    let mut diff = 0u32;
    let last = a.len().saturating_sub(1);
    for i in 0..last {
        diff += (a[i] ^ b[i]).count_ones();
    }
    if !a.is_empty() {
        diff += ((a[last] ^ b[last]) & tail_mask(n)).count_ones();
    }
    n as i64 - 2 * diff as i64
}
