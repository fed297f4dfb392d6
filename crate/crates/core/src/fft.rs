//! Discrete Fourier transform along the token axis.
//!
//! Forward transform is un-normalized, the inverse carries `1/N`. Lengths
//! that are powers of two use an iterative radix-2 Cooley-Tukey pass; all
//! other lengths fall back to the direct `O(N²)` sum.

use num_complex::Complex;

use crate::scalar::Scalar;
use crate::tensor::Mat;

fn twiddle<T: Scalar>(k: usize, n: usize, inverse: bool) -> Complex<T> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let angle = sign * 2.0 * std::f64::consts::PI * k as f64 / n as f64;
    Complex::new(T::lit(angle.cos()), T::lit(angle.sin()))
}

/// Direct transform, no normalization.
pub fn dft_direct<T: Scalar>(x: &[Complex<T>], inverse: bool) -> Vec<Complex<T>> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold(Complex::new(T::zero(), T::zero()), |acc, (t, &v)| {
                acc + v * twiddle::<T>((k * t) % n, n, inverse)
            })
        })
        .collect()
}

fn radix2<T: Scalar>(x: &[Complex<T>], inverse: bool) -> Vec<Complex<T>> {
    let n = x.len();
    let bits = n.trailing_zeros();
    let mut a: Vec<Complex<T>> = vec![Complex::new(T::zero(), T::zero()); n];
    for (i, &v) in x.iter().enumerate() {
        let j = if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) };
        a[j] = v;
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddle::<T>(k * step, n, inverse);
                let u = a[start + k];
                let v = a[start + k + half] * w;
                a[start + k] = u + v;
                a[start + k + half] = u - v;
            }
        }
        len <<= 1;
    }
    a
}

pub fn fft<T: Scalar>(x: &[Complex<T>]) -> Vec<Complex<T>> {
    if x.len().is_power_of_two() {
        radix2(x, false)
    } else {
        dft_direct(x, false)
    }
}

pub fn ifft<T: Scalar>(x: &[Complex<T>]) -> Vec<Complex<T>> {
    let n = x.len();
    let raw = if n.is_power_of_two() {
        radix2(x, true)
    } else {
        dft_direct(x, true)
    };
    let scale = T::count(n.max(1)).recip();
    raw.into_iter().map(|v| v * scale).collect()
}

/// Per-channel transform of a real `L × C` sequence; returns `(re, im)`.
pub fn fft_columns<T: Scalar>(x: &Mat<T>) -> (Mat<T>, Mat<T>) {
    let (len, ch) = x.shape();
    let mut re = Mat::zeros(len, ch);
    let mut im = Mat::zeros(len, ch);
    for c in 0..ch {
        let col: Vec<Complex<T>> = x.column(c).into_iter().map(|v| Complex::new(v, T::zero())).collect();
        for (t, v) in fft(&col).into_iter().enumerate() {
            re[(t, c)] = v.re;
            im[(t, c)] = v.im;
        }
    }
    (re, im)
}

/// Per-channel inverse transform; returns the real part.
pub fn ifft_columns_real<T: Scalar>(re: &Mat<T>, im: &Mat<T>) -> Mat<T> {
    let (len, ch) = re.shape();
    let mut out = Mat::zeros(len, ch);
    for c in 0..ch {
        let col: Vec<Complex<T>> = (0..len).map(|t| Complex::new(re[(t, c)], im[(t, c)])).collect();
        for (t, v) in ifft(&col).into_iter().enumerate() {
            out[(t, c)] = v.re;
        }
    }
    out
}
