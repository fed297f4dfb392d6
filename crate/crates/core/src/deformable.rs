//! The deformable scan: offsets predicted from local context move token
//! centers in space (resampling) and in sequence (reordering).

use crate::deform::{break_exact_ties, gdr_apply, gdr_weights, gkr, GaussianKernelParams, ReorderWeights, ResampleResult};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::offset::{lcfa, offset_net, LcfaParams, OffsetField, OffsetNetParams};
use crate::params::{join, Init, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const DEFAULT_SIGMA_S: f64 = 1.0;
pub const DEFAULT_SIGMA_T: f64 = 0.2;
pub const DEFAULT_K_R: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformableScanConfig {
    pub k_q: usize,
    pub k_r: usize,
    pub radius: f64,
    pub kernel_width: usize,
    pub offset_scale: f64,
    pub sigma_s: f64,
    pub sigma_t: f64,
    pub enable_dp: bool,
    pub enable_dt: bool,
}

impl Default for DeformableScanConfig {
    fn default() -> Self {
        DeformableScanConfig {
            k_q: crate::offset::DEFAULT_NEIGHBORS,
            k_r: DEFAULT_K_R,
            radius: crate::offset::DEFAULT_RADIUS,
            kernel_width: crate::offset::DEFAULT_KERNEL_WIDTH,
            offset_scale: crate::offset::DEFAULT_OFFSET_SCALE,
            sigma_s: DEFAULT_SIGMA_S,
            sigma_t: DEFAULT_SIGMA_T,
            enable_dp: true,
            enable_dt: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformableScanParams<T> {
    pub lcfa: LcfaParams<T>,
    pub offset: OffsetNetParams<T>,
    /// Learnable resampling scale.
    pub sigma_s: T,
    /// Learnable reordering scale.
    pub sigma_t: T,
    pub config: DeformableScanConfig,
}

impl<T: Scalar> DeformableScanParams<T> {
    pub fn zeros(dim: usize, config: DeformableScanConfig) -> Result<Self> {
        let mut offset = OffsetNetParams::zeros(dim, config.kernel_width)?;
        offset.scale = T::lit(config.offset_scale);
        Ok(DeformableScanParams {
            lcfa: LcfaParams::zeros(dim),
            offset,
            sigma_s: T::lit(config.sigma_s),
            sigma_t: T::lit(config.sigma_t),
            config,
        })
    }

    pub fn init(init: &Init, name: &str, dim: usize, config: DeformableScanConfig) -> Result<Self> {
        let mut offset = OffsetNetParams::init(init, &join(name, "offset"), dim, config.kernel_width)?;
        offset.scale = T::lit(config.offset_scale);
        Ok(DeformableScanParams {
            lcfa: LcfaParams::init(init, &join(name, "lcfa"), dim),
            offset,
            sigma_s: T::lit(config.sigma_s),
            sigma_t: T::lit(config.sigma_t),
            config,
        })
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> DeformableScanParams<U> {
        DeformableScanParams {
            lcfa: self.lcfa.map(f),
            offset: self.offset.map(f),
            sigma_s: f(self.sigma_s),
            sigma_t: f(self.sigma_t),
            config: self.config,
        }
    }
}

impl<T: Scalar> Parameters<T> for DeformableScanParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.lcfa.visit(&join(prefix, "lcfa"), f);
        self.offset.visit(&join(prefix, "offset"), f);
        f(&join(prefix, "sigma_s"), &[], std::slice::from_ref(&self.sigma_s));
        f(&join(prefix, "sigma_t"), &[], std::slice::from_ref(&self.sigma_t));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.lcfa.visit_mut(&join(prefix, "lcfa"), f);
        self.offset.visit_mut(&join(prefix, "offset"), f);
        f(&join(prefix, "sigma_s"), &[], std::slice::from_mut(&mut self.sigma_s));
        f(&join(prefix, "sigma_t"), &[], std::slice::from_mut(&mut self.sigma_t));
    }
}

#[derive(Clone, Debug)]
pub struct DeformableScanOutput<T> {
    /// `(N+1) × D`, class token first, then the reordered tokens.
    pub features: Mat<T>,
    pub new_coords: Vec<Point<T>>,
    pub offsets: OffsetField<T>,
    pub resample: ResampleResult<T>,
    pub reorder: ReorderWeights<T>,
}

/// Runs the deformable scan over `tokens` (`(N+1) × D`, class token at row
/// 0) whose `N` geometric tokens sit at `centers` with serialization ranks
/// `base_index`. The class token bypasses deformation.
pub fn deformable_scan<T: Scalar>(
    tokens: &Mat<T>,
    centers: &[Point<T>],
    base_index: &[usize],
    params: &DeformableScanParams<T>,
) -> Result<DeformableScanOutput<T>> {
    let n = centers.len();
    if tokens.rows() != n + 1 {
        return Err(Error::shape("deformable_scan tokens", n + 1, tokens.rows()));
    }
    if base_index.len() != n {
        return Err(Error::shape("deformable_scan base_index", n, base_index.len()));
    }
    if n == 0 {
        return Err(Error::EmptyInput("deformable_scan: centers"));
    }
    let cfg = &params.config;
    let cls = tokens.row(0).to_vec();
    let feats = tokens.tail_rows();

    let ctx = lcfa(&feats, centers, T::lit(cfg.radius), cfg.k_q, &params.lcfa)?;
    let mut offsets = offset_net(&ctx, &params.offset)?;
    if !cfg.enable_dp {
        offsets.delta_p = Mat::zeros(n, 3);
    }
    if !cfg.enable_dt {
        offsets.delta_t = vec![T::zero(); n];
    }
    let delta_t = break_exact_ties(base_index, &offsets.delta_t);

    let source = PointCloud::new(centers.to_vec())?;
    let kernel = GaussianKernelParams::with_sigma(params.sigma_s)?;
    let resample = gkr(&source, &feats, &offsets.delta_p, cfg.k_r.min(n), &kernel)?;
    let mixed = resample.resampled.add(&feats)?;

    let reorder = gdr_weights(base_index, &delta_t, params.sigma_t)?;
    let reordered = gdr_apply(&reorder, &mixed)?;
    Ok(DeformableScanOutput {
        features: reordered.prepend_row(&cls)?,
        new_coords: resample.new_coords.clone(),
        offsets,
        resample,
        reorder,
    })
}
