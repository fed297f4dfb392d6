//! Small layers over `[tokens, channels]` matrices.

use crate::error::{Error, Result};
use crate::params::{join, visit_mat, visit_mat_mut, Init, Parameters};
use crate::scalar::{relu, sigmoid, Scalar};
use crate::tensor::Mat;

/// Dense map with weight stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Mat<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inp: usize, out: usize, bias: bool) -> Self {
        Linear {
            weight: Mat::zeros(out, inp),
            bias: bias.then(|| vec![T::zero(); out]),
        }
    }

    pub fn init(init: &Init, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let bound = 1.0 / (inp.max(1) as f64).sqrt();
        Linear {
            weight: init.dense(&join(name, "weight"), out, inp, inp),
            bias: bias.then(|| init.uniform(&join(name, "bias"), out, bound)),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Mat<T>) -> Result<Mat<T>> {
        let mut y = x.matmul_t(&self.weight)?;
        if let Some(b) = &self.bias {
            for r in 0..y.rows() {
                for (v, &bb) in y.row_mut(r).iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        Ok(y)
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> Linear<U> {
        Linear {
            weight: self.weight.map(f),
            bias: self.bias.as_ref().map(|b| b.iter().map(|&v| f(v)).collect()),
        }
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        visit_mat(prefix, "weight", &self.weight, f);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), &[b.len()], b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        visit_mat_mut(prefix, "weight", &mut self.weight, f);
        if let Some(b) = &mut self.bias {
            let len = b.len();
            f(&join(prefix, "bias"), &[len], b);
        }
    }
}

/// Depthwise convolution along the token axis: one kernel per channel,
/// zero padding, output length equal to input length. Output `t` reads
/// inputs `t - pad_left ..= t - pad_left + width - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv1d<T> {
    /// `[channels, width]`.
    pub weight: Mat<T>,
    pub bias: Vec<T>,
    pub pad_left: usize,
}

impl<T: Scalar> DepthwiseConv1d<T> {
    /// Centered kernel; `width` must be odd.
    pub fn symmetric(channels: usize, width: usize) -> Result<Self> {
        if width.is_multiple_of(2) {
            return Err(Error::param("kernel width", format!("{width} must be odd")));
        }
        Ok(DepthwiseConv1d {
            weight: Mat::zeros(channels, width),
            bias: vec![T::zero(); channels],
            pad_left: width / 2,
        })
    }

    /// Causal kernel: output `t` sees inputs up to `t`.
    pub fn causal(channels: usize, width: usize) -> Self {
        DepthwiseConv1d {
            weight: Mat::zeros(channels, width),
            bias: vec![T::zero(); channels],
            pad_left: width.saturating_sub(1),
        }
    }

    pub fn randomize(mut self, init: &Init, name: &str) -> Self {
        let (c, w) = self.weight.shape();
        self.weight = init.dense(&join(name, "weight"), c, w, w);
        self.bias = init.uniform(&join(name, "bias"), c, 1.0 / (w as f64).sqrt());
        self
    }

    pub fn width(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Mat<T>) -> Result<Mat<T>> {
        let (len, ch) = x.shape();
        if ch != self.weight.rows() {
            return Err(Error::shape("depthwise conv channels", self.weight.rows(), ch));
        }
        let width = self.width();
        let mut y = Mat::zeros(len, ch);
        for t in 0..len {
            for c in 0..ch {
                let mut acc = self.bias[c];
                for k in 0..width {
                    let src = t as isize + k as isize - self.pad_left as isize;
                    if src >= 0 && (src as usize) < len {
                        acc += self.weight[(c, k)] * x[(src as usize, c)];
                    }
                }
                y[(t, c)] = acc;
            }
        }
        Ok(y)
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> DepthwiseConv1d<U> {
        DepthwiseConv1d {
            weight: self.weight.map(f),
            bias: self.bias.iter().map(|&v| f(v)).collect(),
            pad_left: self.pad_left,
        }
    }
}

impl<T: Scalar> Parameters<T> for DepthwiseConv1d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        visit_mat(prefix, "weight", &self.weight, f);
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        visit_mat_mut(prefix, "weight", &mut self.weight, f);
        let len = self.bias.len();
        f(&join(prefix, "bias"), &[len], &mut self.bias);
    }
}

/// Pointwise map with channels split into `groups` independent blocks.
/// Output channel `o` belongs to group `o / (out / groups)` and reads only
/// that group's slice of input channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedPointwise<T> {
    /// `[out, in / groups]`.
    pub weight: Mat<T>,
    pub bias: Option<Vec<T>>,
    pub groups: usize,
    pub in_channels: usize,
}

impl<T: Scalar> GroupedPointwise<T> {
    pub fn zeros(inp: usize, out: usize, groups: usize, bias: bool) -> Result<Self> {
        if groups == 0 || !inp.is_multiple_of(groups) || !out.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "grouped map {inp}->{out} is not divisible into {groups} groups"
            )));
        }
        Ok(GroupedPointwise {
            weight: Mat::zeros(out, inp / groups),
            bias: bias.then(|| vec![T::zero(); out]),
            groups,
            in_channels: inp,
        })
    }

    pub fn randomize(mut self, init: &Init, name: &str) -> Self {
        let (o, i) = self.weight.shape();
        self.weight = init.dense(&join(name, "weight"), o, i, i);
        if self.bias.is_some() {
            self.bias = Some(init.uniform(&join(name, "bias"), o, 1.0 / (i as f64).sqrt()));
        }
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Mat<T>) -> Result<Mat<T>> {
        if x.cols() != self.in_channels {
            return Err(Error::shape("grouped pointwise input", self.in_channels, x.cols()));
        }
        let out = self.out_channels();
        let in_per = self.in_channels / self.groups;
        let out_per = out / self.groups;
        Ok(Mat::from_fn(x.rows(), out, |t, o| {
            let g = o / out_per;
            let xs = &x.row(t)[g * in_per..(g + 1) * in_per];
            let mut acc = self.bias.as_ref().map_or(T::zero(), |b| b[o]);
            for (&w, &v) in self.weight.row(o).iter().zip(xs) {
                acc += w * v;
            }
            acc
        }))
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> GroupedPointwise<U> {
        GroupedPointwise {
            weight: self.weight.map(f),
            bias: self.bias.as_ref().map(|b| b.iter().map(|&v| f(v)).collect()),
            groups: self.groups,
            in_channels: self.in_channels,
        }
    }
}

impl<T: Scalar> Parameters<T> for GroupedPointwise<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        visit_mat(prefix, "weight", &self.weight, f);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), &[b.len()], b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        visit_mat_mut(prefix, "weight", &mut self.weight, f);
        if let Some(b) = &mut self.bias {
            let len = b.len();
            f(&join(prefix, "bias"), &[len], b);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-token normalization over channels with learned gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: vec![T::one(); dim],
            bias: vec![T::zero(); dim],
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> Result<Mat<T>> {
        if x.cols() != self.gain.len() {
            return Err(Error::shape("layer norm width", self.gain.len(), x.cols()));
        }
        let d = T::count(x.cols());
        let eps = T::lit(LAYER_NORM_EPS);
        let mut y = x.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let inv = (var + eps).sqrt().recip();
            for ((v, &g), &b) in row.iter_mut().zip(&self.gain).zip(&self.bias) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        Ok(y)
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> LayerNorm<U> {
        LayerNorm {
            gain: self.gain.iter().map(|&v| f(v)).collect(),
            bias: self.bias.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "gain"), &[self.gain.len()], &self.gain);
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let n = self.gain.len();
        f(&join(prefix, "gain"), &[n], &mut self.gain);
        f(&join(prefix, "bias"), &[n], &mut self.bias);
    }
}

pub const SE_REDUCTION: usize = 4;

/// Squeeze-excitation channel gate: average over tokens, squeeze through a
/// narrow ReLU layer, expand, sigmoid, scale each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention<T> {
    pub squeeze: Linear<T>,
    pub expand: Linear<T>,
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn zeros(channels: usize) -> Self {
        let hidden = (channels / SE_REDUCTION).max(1);
        ChannelAttention {
            squeeze: Linear::zeros(channels, hidden, true),
            expand: Linear::zeros(hidden, channels, true),
        }
    }

    pub fn init(init: &Init, name: &str, channels: usize) -> Self {
        let hidden = (channels / SE_REDUCTION).max(1);
        ChannelAttention {
            squeeze: Linear::init(init, &join(name, "squeeze"), channels, hidden, true),
            expand: Linear::init(init, &join(name, "expand"), hidden, channels, true),
        }
    }

    /// Per-channel gate values in (0, 1).
    pub fn gate(&self, x: &Mat<T>) -> Result<Vec<T>> {
        let len = T::count(x.rows().max(1));
        let pooled = Mat::from_fn(1, x.cols(), |_, c| x.column(c).into_iter().sum::<T>() / len);
        let hidden = self.squeeze.forward(&pooled)?.map(relu);
        Ok(self.expand.forward(&hidden)?.row(0).iter().map(|&v| sigmoid(v)).collect())
    }

    pub fn forward(&self, x: &Mat<T>) -> Result<Mat<T>> {
        let g = self.gate(x)?;
        Ok(Mat::from_fn(x.rows(), x.cols(), |r, c| x[(r, c)] * g[c]))
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> ChannelAttention<U> {
        ChannelAttention {
            squeeze: self.squeeze.map(f),
            expand: self.expand.map(f),
        }
    }
}

impl<T: Scalar> Parameters<T> for ChannelAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.squeeze.visit(&join(prefix, "squeeze"), f);
        self.expand.visit(&join(prefix, "expand"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.squeeze.visit_mut(&join(prefix, "squeeze"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
    }
}
