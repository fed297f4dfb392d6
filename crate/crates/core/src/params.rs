//! Named parameter arrays: traversal, flattening and seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Anything that owns named parameter arrays.
///
/// Names are dotted paths (`stage0.dmb.fwd.x_proj`). Shapes are `[]` for a
/// scalar, `[n]` for a vector and `[rows, cols]` for a matrix.
pub trait Parameters<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T]));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_mat<T: Scalar>(prefix: &str, name: &str, m: &Mat<T>, f: &mut dyn FnMut(&str, &[usize], &[T])) {
    f(&join(prefix, name), &[m.rows(), m.cols()], m.as_slice());
}

pub(crate) fn visit_mat_mut<T: Scalar>(
    prefix: &str,
    name: &str,
    m: &mut Mat<T>,
    f: &mut dyn FnMut(&str, &[usize], &mut [T]),
) {
    let shape = [m.rows(), m.cols()];
    f(&join(prefix, name), &shape, m.as_mut_slice());
}

pub fn param_count<T, P: Parameters<T> + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, v| n += v.len());
    n
}

/// All parameters concatenated in visiting order.
pub fn flatten<T: Copy, P: Parameters<T> + ?Sized>(p: &P) -> Vec<T> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, v| out.extend_from_slice(v));
    out
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Copy, P: Parameters<T> + ?Sized>(p: &mut P, values: &[T]) -> Result<()> {
    let expected = {
        let mut n = 0;
        p.visit("", &mut |_, _, v| n += v.len());
        n
    };
    if values.len() != expected {
        return Err(Error::shape("unflatten", expected, values.len()));
    }
    let mut offset = 0;
    p.visit_mut("", &mut |_, _, v| {
        v.copy_from_slice(&values[offset..offset + v.len()]);
        offset += v.len();
    });
    Ok(())
}

/// `(name, shape, offset into the flat vector)` for every array.
pub fn layout<T, P: Parameters<T> + ?Sized>(p: &P) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut offset = 0;
    p.visit("", &mut |name, shape, v| {
        out.push((name.to_string(), shape.to_vec(), offset));
        offset += v.len();
    });
    out
}

/// Seeded parameter source.
///
/// Each array draws from its own ChaCha8 stream keyed by
/// `seed XOR fnv1a64(name)`, so adding or reordering arrays never shifts
/// the values of the others.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(name.as_bytes()))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<T: Scalar>(&self, name: &str, len: usize, bound: f64) -> Vec<T> {
        let mut rng = self.rng(name);
        (0..len)
            .map(|_| T::lit(if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 }))
            .collect()
    }

    /// `[rows, cols]` matrix, uniform in `±1/sqrt(fan_in)`.
    pub fn dense<T: Scalar>(&self, name: &str, rows: usize, cols: usize, fan_in: usize) -> Mat<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Mat::from_vec(rows, cols, self.uniform(name, rows * cols, bound)).expect("sized")
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
