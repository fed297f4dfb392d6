//! 3D Hilbert-curve serialization.
//!
//! Encoding follows Skilling's transposed-axes construction ("Programming
//! the Hilbert curve", 2004) with axes ordered (x, y, z); within each 3-bit
//! digit of the curve index, x is the most significant bit.

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::scalar::Scalar;

pub const MAX_ORDER: u32 = 16;
pub const DEFAULT_ORDER: u32 = 9;

fn check_order(order: u32) -> Result<()> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::param("order", format!("{order} not in 1..={MAX_ORDER}")));
    }
    Ok(())
}

/// Curve index of a grid cell, in `[0, 8^order)`.
pub fn hilbert_encode(cell: [u32; 3], order: u32) -> Result<u64> {
    check_order(order)?;
    let side = 1u64 << order;
    if let Some(&bad) = cell.iter().find(|&&c| u64::from(c) >= side) {
        return Err(Error::Bounds {
            value: bad.into(),
            side,
        });
    }
    let mut x = cell;
    axes_to_transpose(&mut x, order);
    let mut h = 0u64;
    for bit in (0..order).rev() {
        for xi in x {
            h = (h << 1) | u64::from((xi >> bit) & 1);
        }
    }
    Ok(h)
}

/// Grid cell at a curve index.
pub fn hilbert_decode(index: u64, order: u32) -> Result<[u32; 3]> {
    check_order(order)?;
    let len = 1u64 << (3 * order);
    if index >= len {
        return Err(Error::Bounds {
            value: index,
            side: len,
        });
    }
    let mut x = [0u32; 3];
    for bit in 0..order {
        for (i, xi) in x.iter_mut().enumerate() {
            let shift = 3 * bit + (2 - i as u32);
            *xi |= (((index >> shift) & 1) as u32) << bit;
        }
    }
    transpose_to_axes(&mut x, order);
    Ok(x)
}

fn axes_to_transpose(x: &mut [u32; 3], order: u32) {
    let m = 1u32 << (order - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for xi in x.iter_mut() {
        *xi ^= t;
    }
}

fn transpose_to_axes(x: &mut [u32; 3], order: u32) {
    let n = 2u32 << (order - 1);
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q = 2u32;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
}

/// Axis-aligned box used to quantize coordinates onto the curve grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HilbertConfig {
    pub order: u32,
    pub bbox: Aabb,
}

impl HilbertConfig {
    /// Fits the box to `points`; an axis with zero extent is widened by a
    /// small epsilon on each side.
    pub fn fit<T: Scalar>(points: &[Point<T>], order: u32) -> Result<Self> {
        check_order(order)?;
        if points.is_empty() {
            return Err(Error::EmptyInput("HilbertConfig::fit: points"));
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                let v = p[a].primal();
                min[a] = min[a].min(v);
                max[a] = max[a].max(v);
            }
        }
        for a in 0..3 {
            if max[a] - min[a] <= 0.0 {
                let pad = 1e-9 * (1.0 + min[a].abs());
                min[a] -= pad;
                max[a] += pad;
            }
        }
        Ok(HilbertConfig {
            order,
            bbox: Aabb { min, max },
        })
    }

    /// Grid cell holding `p`; points outside the box clamp to the border.
    pub fn quantize<T: Scalar>(&self, p: &Point<T>) -> [u32; 3] {
        let side = 1u64 << self.order;
        let top = (side - 1) as f64;
        let mut cell = [0u32; 3];
        for a in 0..3 {
            let extent = self.bbox.max[a] - self.bbox.min[a];
            let u = (p[a].primal() - self.bbox.min[a]) / extent;
            cell[a] = (u * side as f64).floor().clamp(0.0, top) as u32;
        }
        cell
    }

    pub fn key<T: Scalar>(&self, p: &Point<T>) -> u64 {
        hilbert_encode(self.quantize(p), self.order).expect("quantized cell is in range")
    }
}

/// Token order along the curve.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializedOrder {
    /// `perm[r]` is the input index placed at rank `r`.
    pub perm: Vec<usize>,
    /// `base_index[i]` is the rank of input `i`; the inverse of `perm`.
    pub base_index: Vec<usize>,
    /// Curve key of each input.
    pub keys: Vec<u64>,
}

/// Sorts centers by (curve key, input index).
pub fn serialize<T: Scalar>(centers: &[Point<T>], cfg: &HilbertConfig) -> Result<SerializedOrder> {
    if centers.is_empty() {
        return Err(Error::EmptyInput("serialize: centers"));
    }
    let keys: Vec<u64> = centers.iter().map(|p| cfg.key(p)).collect();
    let mut perm: Vec<usize> = (0..centers.len()).collect();
    perm.sort_by_key(|&i| (keys[i], i));
    let mut base_index = vec![0; perm.len()];
    for (rank, &i) in perm.iter().enumerate() {
        base_index[i] = rank;
    }
    Ok(SerializedOrder {
        perm,
        base_index,
        keys,
    })
}
