//! Tri-path frequency fusion of the forward, channel-flip and deformable
//! branch outputs.
//!
//! 1. Cross modulation: each path is scaled by the mean sigmoid map of the
//!    other two.
//! 2. Grouped pointwise fusion `3C → C`, then channel shuffle.
//! 3. Frequency enhancement: DFT along tokens, `[re; im]` through a grouped
//!    pointwise map, inverse DFT, real part.

use crate::error::{Error, Result};
use crate::fft::{fft_columns, ifft_columns_real};
use crate::nn::GroupedPointwise;
use crate::params::{join, Init, Parameters};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Mat;

pub const DEFAULT_GROUPS: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TriPathBundle<T> {
    pub f_fwd: Mat<T>,
    pub f_chan: Mat<T>,
    pub f_def: Mat<T>,
}

impl<T: Scalar> TriPathBundle<T> {
    pub fn new(f_fwd: Mat<T>, f_chan: Mat<T>, f_def: Mat<T>) -> Result<Self> {
        for (name, m) in [("channel path", &f_chan), ("deformable path", &f_def)] {
            if m.shape() != f_fwd.shape() {
                return Err(Error::Shape {
                    context: "TriPathBundle",
                    expected: format!("{:?}", f_fwd.shape()),
                    got: format!("{name} {:?}", m.shape()),
                });
            }
        }
        Ok(TriPathBundle { f_fwd, f_chan, f_def })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.f_fwd.shape()
    }
}

/// Group count actually used for `channels`: the requested count, reduced
/// to `channels` when there are fewer channels than groups.
pub fn effective_groups(channels: usize, requested: usize) -> Result<usize> {
    let g = requested.min(channels).max(1);
    if !channels.is_multiple_of(g) {
        return Err(Error::Config(format!("{channels} channels not divisible into {g} groups")));
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyBlockParams<T> {
    /// `3C → C`, no bias.
    pub fuse: GroupedPointwise<T>,
    /// `2C → 2C` on `[re; im]`, with bias.
    pub freq: GroupedPointwise<T>,
    pub shuffle_groups: usize,
}

impl<T: Scalar> FrequencyBlockParams<T> {
    pub fn zeros(channels: usize, groups: usize) -> Result<Self> {
        let g = effective_groups(channels, groups)?;
        Ok(FrequencyBlockParams {
            fuse: GroupedPointwise::zeros(3 * channels, channels, g, false)?,
            freq: GroupedPointwise::zeros(2 * channels, 2 * channels, g, true)?,
            shuffle_groups: g,
        })
    }

    pub fn init(init: &Init, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let mut p = Self::zeros(channels, groups)?;
        p.fuse = p.fuse.randomize(init, &join(name, "fuse"));
        p.freq = p.freq.randomize(init, &join(name, "freq"));
        Ok(p)
    }

    /// Frequency map set to the identity with zero bias.
    pub fn with_identity_frequency(mut self) -> Self {
        let (o, i) = self.freq.weight.shape();
        let per = o / self.freq.groups;
        self.freq.weight = Mat::from_fn(o, i, |r, c| if r % per == c { T::one() } else { T::zero() });
        self.freq.bias = Some(vec![T::zero(); o]);
        self
    }

    pub fn channels(&self) -> usize {
        self.fuse.out_channels()
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> FrequencyBlockParams<U> {
        FrequencyBlockParams {
            fuse: self.fuse.map(f),
            freq: self.freq.map(f),
            shuffle_groups: self.shuffle_groups,
        }
    }
}

impl<T: Scalar> Parameters<T> for FrequencyBlockParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.fuse.visit(&join(prefix, "fuse"), f);
        self.freq.visit(&join(prefix, "freq"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        self.freq.visit_mut(&join(prefix, "freq"), f);
    }
}

pub fn cross_modulate<T: Scalar>(b: &TriPathBundle<T>) -> Result<TriPathBundle<T>> {
    let half = T::lit(0.5);
    let s_f = b.f_fwd.map(sigmoid);
    let s_c = b.f_chan.map(sigmoid);
    let s_d = b.f_def.map(sigmoid);
    let gate = |x: &Mat<T>, p: &Mat<T>, q: &Mat<T>| -> Result<Mat<T>> {
        x.hadamard(&p.zip_map(q, |u, v| half * (u + v))?)
    };
    TriPathBundle::new(
        gate(&b.f_fwd, &s_c, &s_d)?,
        gate(&b.f_chan, &s_f, &s_d)?,
        gate(&b.f_def, &s_f, &s_c)?,
    )
}

/// With `g` groups of `c = C/g` channels, channel `k·c + m` moves to
/// `m·g + k`.
pub fn channel_shuffle<T: Scalar>(x: &Mat<T>, groups: usize) -> Result<Mat<T>> {
    let ch = x.cols();
    if groups == 0 || !ch.is_multiple_of(groups) {
        return Err(Error::Config(format!("{ch} channels not divisible into {groups} groups")));
    }
    let per = ch / groups;
    let mut out = Mat::zeros(x.rows(), ch);
    for r in 0..x.rows() {
        for k in 0..groups {
            for m in 0..per {
                out[(r, m * groups + k)] = x[(r, k * per + m)];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`channel_shuffle`].
pub fn channel_unshuffle<T: Scalar>(x: &Mat<T>, groups: usize) -> Result<Mat<T>> {
    let ch = x.cols();
    if groups == 0 || !ch.is_multiple_of(groups) {
        return Err(Error::Config(format!("{ch} channels not divisible into {groups} groups")));
    }
    channel_shuffle(x, ch / groups)
}

pub fn grouped_fuse_shuffle<T: Scalar>(modulated: &TriPathBundle<T>, params: &FrequencyBlockParams<T>) -> Result<Mat<T>> {
    let cat = Mat::hcat(&[&modulated.f_fwd, &modulated.f_chan, &modulated.f_def])?;
    let fused = params.fuse.forward(&cat)?;
    channel_shuffle(&fused, params.shuffle_groups)
}

pub fn frequency_enhance<T: Scalar>(x: &Mat<T>, freq: &GroupedPointwise<T>) -> Result<Mat<T>> {
    let ch = x.cols();
    if freq.in_channels != 2 * ch || freq.out_channels() != 2 * ch {
        return Err(Error::shape("frequency map", 2 * ch, freq.in_channels));
    }
    let (re, im) = fft_columns(x);
    let mixed = freq.forward(&Mat::hcat(&[&re, &im])?)?;
    Ok(ifft_columns_real(&mixed.columns(0, ch), &mixed.columns(ch, 2 * ch)))
}

pub fn tpff<T: Scalar>(bundle: &TriPathBundle<T>, params: &FrequencyBlockParams<T>) -> Result<Mat<T>> {
    if bundle.shape().1 != params.channels() {
        return Err(Error::shape("tpff channels", params.channels(), bundle.shape().1));
    }
    let modulated = cross_modulate(bundle)?;
    let fused = grouped_fuse_shuffle(&modulated, params)?;
    frequency_enhance(&fused, &params.freq)
}
