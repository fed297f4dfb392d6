//! Local context aggregation and the offset network.
//!
//! For every token, a ball-query neighborhood over the token centers is
//! weighted channel by channel by a pointwise map of `[own feature;
//! neighbor feature]` and summed into a context vector. The context,
//! concatenated after the token's own feature, feeds a small convolutional
//! network whose four tanh-bounded outputs split into a spatial offset
//! `Δp` (3) and a sequential offset `Δt` (1).

use crate::error::{Error, Result};
use crate::geometry::{ball_query, Point, PointCloud};
use crate::nn::{ChannelAttention, DepthwiseConv1d, Linear};
use crate::params::{join, Init, Parameters};
use crate::scalar::{gelu, relu, tanh_open, Scalar};
use crate::tensor::Mat;

pub const DEFAULT_NEIGHBORS: usize = 8;
pub const DEFAULT_RADIUS: f64 = 0.1;
pub const DEFAULT_KERNEL_WIDTH: usize = 5;
pub const DEFAULT_OFFSET_SCALE: f64 = 1.0;

/// Nonlinearity applied to the aggregation weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }
}

/// Pointwise map `2D → D` producing per-neighbor, per-channel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LcfaParams<T> {
    pub weight_map: Linear<T>,
    pub activation: Activation,
}

impl<T: Scalar> LcfaParams<T> {
    pub fn zeros(dim: usize) -> Self {
        LcfaParams {
            weight_map: Linear::zeros(2 * dim, dim, true),
            activation: Activation::Gelu,
        }
    }

    pub fn init(init: &Init, name: &str, dim: usize) -> Self {
        LcfaParams {
            weight_map: Linear::init(init, &join(name, "weight_map"), 2 * dim, dim, true),
            activation: Activation::Gelu,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight_map.out_features()
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> LcfaParams<U> {
        LcfaParams {
            weight_map: self.weight_map.map(f),
            activation: self.activation,
        }
    }
}

impl<T: Scalar> Parameters<T> for LcfaParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.weight_map.visit(&join(prefix, "weight_map"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.weight_map.visit_mut(&join(prefix, "weight_map"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodContext<T> {
    /// `N × K_q` ball-query indices into the centers.
    pub neighbors: Vec<Vec<usize>>,
    pub neighbor_coords: Vec<Vec<Point<T>>>,
    /// Per token, `K_q × D` neighbor features.
    pub neighbor_feats: Vec<Mat<T>>,
    /// Per token, its own feature repeated `K_q` times.
    pub center_expanded: Vec<Mat<T>>,
    /// `N × D`.
    pub context: Mat<T>,
    /// `N × 2D`: `[own feature; context]`.
    pub aggregated: Mat<T>,
}

pub fn lcfa<T: Scalar>(
    features: &Mat<T>,
    centers: &[Point<T>],
    radius: T,
    k_q: usize,
    params: &LcfaParams<T>,
) -> Result<NeighborhoodContext<T>> {
    let (n, d) = features.shape();
    if centers.len() != n {
        return Err(Error::shape("lcfa centers", n, centers.len()));
    }
    if params.dim() != d {
        return Err(Error::shape("lcfa weight map width", params.dim(), d));
    }
    let cloud = PointCloud::new(centers.to_vec())?;
    let neighbors = ball_query(centers, &cloud, radius, k_q, None)?;

    let mut context = Mat::zeros(n, d);
    let mut neighbor_coords = Vec::with_capacity(n);
    let mut neighbor_feats = Vec::with_capacity(n);
    let mut center_expanded = Vec::with_capacity(n);
    for (i, nbrs) in neighbors.iter().enumerate() {
        let own = features.gather_rows(&vec![i; nbrs.len()]);
        let theirs = features.gather_rows(nbrs);
        let weights = params
            .weight_map
            .forward(&Mat::hcat(&[&own, &theirs])?)?
            .map(|v| params.activation.apply(v));
        let ctx = context.row_mut(i);
        for k in 0..nbrs.len() {
            for (c, out) in ctx.iter_mut().enumerate() {
                *out += weights[(k, c)] * theirs[(k, c)];
            }
        }
        neighbor_coords.push(nbrs.iter().map(|&j| centers[j]).collect());
        neighbor_feats.push(theirs);
        center_expanded.push(own);
    }
    let aggregated = Mat::hcat(&[features, &context])?;
    Ok(NeighborhoodContext {
        neighbors,
        neighbor_coords,
        neighbor_feats,
        center_expanded,
        context,
        aggregated,
    })
}

/// Depthwise conv over `2D` channels, pointwise reduction to `D/2`,
/// squeeze-excitation gate, ReLU, projection to 4 offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetNetParams<T> {
    pub depthwise: DepthwiseConv1d<T>,
    pub reduce: Linear<T>,
    pub attention: ChannelAttention<T>,
    pub project: Linear<T>,
    pub scale: T,
}

impl<T: Scalar> OffsetNetParams<T> {
    pub fn zeros(dim: usize, kernel_width: usize) -> Result<Self> {
        let half = half_width(dim)?;
        Ok(OffsetNetParams {
            depthwise: DepthwiseConv1d::symmetric(2 * dim, kernel_width)?,
            reduce: Linear::zeros(2 * dim, half, true),
            attention: ChannelAttention::zeros(half),
            project: Linear::zeros(half, 4, true),
            scale: T::lit(DEFAULT_OFFSET_SCALE),
        })
    }

    pub fn init(init: &Init, name: &str, dim: usize, kernel_width: usize) -> Result<Self> {
        let half = half_width(dim)?;
        Ok(OffsetNetParams {
            depthwise: DepthwiseConv1d::symmetric(2 * dim, kernel_width)?.randomize(init, &join(name, "depthwise")),
            reduce: Linear::init(init, &join(name, "reduce"), 2 * dim, half, true),
            attention: ChannelAttention::init(init, &join(name, "attention"), half),
            project: Linear::init(init, &join(name, "project"), half, 4, true),
            scale: T::lit(DEFAULT_OFFSET_SCALE),
        })
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> OffsetNetParams<U> {
        OffsetNetParams {
            depthwise: self.depthwise.map(f),
            reduce: self.reduce.map(f),
            attention: self.attention.map(f),
            project: self.project.map(f),
            scale: f(self.scale),
        }
    }
}

fn half_width(dim: usize) -> Result<usize> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("feature width {dim} must be even and at least 2")));
    }
    Ok(dim / 2)
}

impl<T: Scalar> Parameters<T> for OffsetNetParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.depthwise.visit(&join(prefix, "depthwise"), f);
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.project.visit(&join(prefix, "project"), f);
    }

    // The offset scale is a fixed hyperparameter and is not visited.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.depthwise.visit_mut(&join(prefix, "depthwise"), f);
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T> {
    /// `N × 3`, each entry in `(-s, s)`.
    pub delta_p: Mat<T>,
    /// `N`, each entry in `(-s, s)`.
    pub delta_t: Vec<T>,
}

impl<T: Scalar> OffsetField<T> {
    pub fn zeros(n: usize) -> Self {
        OffsetField {
            delta_p: Mat::zeros(n, 3),
            delta_t: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.delta_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_t.is_empty()
    }
}

/// Pre-tanh offsets, `N × 4`.
pub fn offset_logits<T: Scalar>(aggregated: &Mat<T>, params: &OffsetNetParams<T>) -> Result<Mat<T>> {
    let x = params.depthwise.forward(aggregated)?;
    let x = params.reduce.forward(&x)?;
    let x = params.attention.forward(&x)?.map(relu);
    params.project.forward(&x)
}

pub fn offset_net<T: Scalar>(ctx: &NeighborhoodContext<T>, params: &OffsetNetParams<T>) -> Result<OffsetField<T>> {
    offset_field(&ctx.aggregated, params)
}

/// Offsets straight from an aggregated `N × 2D` representation.
pub fn offset_field<T: Scalar>(aggregated: &Mat<T>, params: &OffsetNetParams<T>) -> Result<OffsetField<T>> {
    if !(params.scale.primal() > 0.0) {
        return Err(Error::param("offset scale", "must be positive"));
    }
    let logits = offset_logits(aggregated, params)?;
    let n = logits.rows();
    let bounded = logits.map(|v| tanh_open(v) * params.scale);
    Ok(OffsetField {
        delta_p: bounded.columns(0, 3),
        delta_t: (0..n).map(|i| bounded[(i, 3)]).collect(),
    })
}
