//! The three-branch deformable state-space block and the residual stage
//! wrapped around it.
//!
//! Branches over the `(N+1) × D` token sequence:
//!
//! - forward: input projection to `[x; z]`, causal depthwise conv on `x`,
//!   SiLU, selective scan, gated by `SiLU(z)`;
//! - channel-flip: the same pipeline on the projection with its channel
//!   order reversed, output reversed back;
//! - deformable: deformable scan, pointwise map to the inner width,
//!   width-3 depthwise conv, GELU, selective scan.
//!
//! The three outputs are fused by [`tpff`](crate::tpff::tpff), gated by
//! `sigmoid` of a pointwise map of the block input, and projected back to
//! `D` channels.

use crate::deformable::{deformable_scan, DeformableScanConfig, DeformableScanOutput, DeformableScanParams};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn::{DepthwiseConv1d, LayerNorm, Linear};
use crate::params::{join, Init, Parameters};
use crate::scalar::{gelu, sigmoid, silu, Scalar};
use crate::ssm::{selective_scan, SsmParams, StateInit};
use crate::tensor::Mat;
use crate::tpff::{tpff, FrequencyBlockParams, TriPathBundle, DEFAULT_GROUPS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub groups: usize,
    pub deform: DeformableScanConfig,
}

impl BlockConfig {
    pub fn new(d_model: usize) -> Self {
        BlockConfig {
            d_model,
            d_state: 16,
            expand: 2,
            d_conv: 4,
            groups: DEFAULT_GROUPS,
            deform: DeformableScanConfig::default(),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmbParams<T> {
    pub in_proj: Linear<T>,
    pub conv_fwd: DepthwiseConv1d<T>,
    pub ssm_fwd: SsmParams<T>,
    pub conv_chan: DepthwiseConv1d<T>,
    pub ssm_chan: SsmParams<T>,
    pub deform: DeformableScanParams<T>,
    pub def_proj: Linear<T>,
    pub conv_def: DepthwiseConv1d<T>,
    pub ssm_def: SsmParams<T>,
    pub fusion: FrequencyBlockParams<T>,
    pub gate_proj: Linear<T>,
    pub out_proj: Linear<T>,
    pub config: BlockConfig,
}

impl<T: Scalar> DmbParams<T> {
    pub fn zeros(config: BlockConfig) -> Result<Self> {
        let d = config.d_model;
        let di = config.d_inner();
        let (ds, rank) = (config.d_state, config.dt_rank());
        Ok(DmbParams {
            in_proj: Linear::zeros(d, 2 * di, false),
            conv_fwd: DepthwiseConv1d::causal(di, config.d_conv),
            ssm_fwd: SsmParams::zeros(di, ds, rank),
            conv_chan: DepthwiseConv1d::causal(di, config.d_conv),
            ssm_chan: SsmParams::zeros(di, ds, rank),
            deform: DeformableScanParams::zeros(d, config.deform)?,
            def_proj: Linear::zeros(d, di, true),
            conv_def: DepthwiseConv1d::symmetric(di, 3)?,
            ssm_def: SsmParams::zeros(di, ds, rank),
            fusion: FrequencyBlockParams::zeros(di, config.groups)?,
            gate_proj: Linear::zeros(d, di, true),
            out_proj: Linear::zeros(di, d, false),
            config,
        })
    }

    pub fn init(init: &Init, name: &str, config: BlockConfig) -> Result<Self> {
        let d = config.d_model;
        let di = config.d_inner();
        let (ds, rank) = (config.d_state, config.dt_rank());
        let n = |s: &str| join(name, s);
        Ok(DmbParams {
            in_proj: Linear::init(init, &n("in_proj"), d, 2 * di, false),
            conv_fwd: DepthwiseConv1d::causal(di, config.d_conv).randomize(init, &n("conv_fwd")),
            ssm_fwd: SsmParams::init(init, &n("ssm_fwd"), di, ds, rank, StateInit::Arange),
            conv_chan: DepthwiseConv1d::causal(di, config.d_conv).randomize(init, &n("conv_chan")),
            ssm_chan: SsmParams::init(init, &n("ssm_chan"), di, ds, rank, StateInit::Arange),
            deform: DeformableScanParams::init(init, &n("deform"), d, config.deform)?,
            def_proj: Linear::init(init, &n("def_proj"), d, di, true),
            conv_def: DepthwiseConv1d::symmetric(di, 3)?.randomize(init, &n("conv_def")),
            ssm_def: SsmParams::init(init, &n("ssm_def"), di, ds, rank, StateInit::Spaced),
            fusion: FrequencyBlockParams::init(init, &n("fusion"), di, config.groups)?,
            gate_proj: Linear::init(init, &n("gate_proj"), d, di, true),
            out_proj: Linear::init(init, &n("out_proj"), di, d, false),
            config,
        })
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> DmbParams<U> {
        DmbParams {
            in_proj: self.in_proj.map(f),
            conv_fwd: self.conv_fwd.map(f),
            ssm_fwd: self.ssm_fwd.map(f),
            conv_chan: self.conv_chan.map(f),
            ssm_chan: self.ssm_chan.map(f),
            deform: self.deform.map(f),
            def_proj: self.def_proj.map(f),
            conv_def: self.conv_def.map(f),
            ssm_def: self.ssm_def.map(f),
            fusion: self.fusion.map(f),
            gate_proj: self.gate_proj.map(f),
            out_proj: self.out_proj.map(f),
            config: self.config,
        }
    }
}

impl<T: Scalar> Parameters<T> for DmbParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.in_proj.visit(&join(prefix, "in_proj"), f);
        self.conv_fwd.visit(&join(prefix, "conv_fwd"), f);
        self.ssm_fwd.visit(&join(prefix, "ssm_fwd"), f);
        self.conv_chan.visit(&join(prefix, "conv_chan"), f);
        self.ssm_chan.visit(&join(prefix, "ssm_chan"), f);
        self.deform.visit(&join(prefix, "deform"), f);
        self.def_proj.visit(&join(prefix, "def_proj"), f);
        self.conv_def.visit(&join(prefix, "conv_def"), f);
        self.ssm_def.visit(&join(prefix, "ssm_def"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.gate_proj.visit(&join(prefix, "gate_proj"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.in_proj.visit_mut(&join(prefix, "in_proj"), f);
        self.conv_fwd.visit_mut(&join(prefix, "conv_fwd"), f);
        self.ssm_fwd.visit_mut(&join(prefix, "ssm_fwd"), f);
        self.conv_chan.visit_mut(&join(prefix, "conv_chan"), f);
        self.ssm_chan.visit_mut(&join(prefix, "ssm_chan"), f);
        self.deform.visit_mut(&join(prefix, "deform"), f);
        self.def_proj.visit_mut(&join(prefix, "def_proj"), f);
        self.conv_def.visit_mut(&join(prefix, "conv_def"), f);
        self.ssm_def.visit_mut(&join(prefix, "ssm_def"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.gate_proj.visit_mut(&join(prefix, "gate_proj"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

/// Reverses the channel order.
pub fn flip_channels<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let c = x.cols();
    Mat::from_fn(x.rows(), c, |r, k| x[(r, c - 1 - k)])
}

/// Conv → SiLU → scan on the first half of `xz`, gated by SiLU of the
/// second half.
pub fn gated_scan_branch<T: Scalar>(xz: &Mat<T>, conv: &DepthwiseConv1d<T>, ssm: &SsmParams<T>) -> Result<Mat<T>> {
    let di = xz.cols() / 2;
    let x = conv.forward(&xz.columns(0, di))?.map(silu);
    let y = selective_scan(&x, ssm)?;
    y.zip_map(&xz.columns(di, 2 * di), |a, z| a * silu(z))
}

/// Pointwise map → width-3 conv → GELU → scan, on already deformed tokens.
pub fn deformable_branch<T: Scalar>(deformed: &Mat<T>, params: &DmbParams<T>) -> Result<Mat<T>> {
    let x = params.def_proj.forward(deformed)?;
    let x = params.conv_def.forward(&x)?.map(gelu);
    selective_scan(&x, &params.ssm_def)
}

#[derive(Clone, Debug)]
pub struct BlockOutput<T> {
    /// `(N+1) × D`.
    pub out: Mat<T>,
    pub branches: TriPathBundle<T>,
    pub deform: DeformableScanOutput<T>,
}

impl<T: Scalar> BlockOutput<T> {
    pub fn new_coords(&self) -> &[Point<T>] {
        &self.deform.new_coords
    }

    /// Shifted sequence positions `I + Δt`.
    pub fn new_order(&self) -> &[T] {
        &self.deform.reorder.shifted_index
    }
}

pub fn dmb_forward<T: Scalar>(
    tokens: &Mat<T>,
    centers: &[Point<T>],
    base_index: &[usize],
    params: &DmbParams<T>,
) -> Result<BlockOutput<T>> {
    let d = params.config.d_model;
    if tokens.cols() != d {
        return Err(Error::shape("dmb_forward width", d, tokens.cols()));
    }
    let xz = params.in_proj.forward(tokens)?;
    let f_fwd = gated_scan_branch(&xz, &params.conv_fwd, &params.ssm_fwd)?;
    let f_chan = flip_channels(&gated_scan_branch(&flip_channels(&xz), &params.conv_chan, &params.ssm_chan)?);

    let deform = deformable_scan(tokens, centers, base_index, &params.deform)?;
    let f_def = deformable_branch(&deform.features, params)?;

    let branches = TriPathBundle::new(f_fwd, f_chan, f_def)?;
    let fused = tpff(&branches, &params.fusion)?;
    let gate = params.gate_proj.forward(tokens)?.map(sigmoid);
    let out = params.out_proj.forward(&fused.hadamard(&gate)?)?;
    Ok(BlockOutput { out, branches, deform })
}

/// The local-enhancement sub-layer that precedes the block in each stage.
pub trait LocalEnhancer<T: Scalar> {
    /// Residual contribution for the layer-normalized tokens.
    fn enhance(&self, normed: &Mat<T>) -> Result<Mat<T>>;
}

/// Contributes nothing, so the first residual sub-layer is the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct Passthrough;

impl<T: Scalar> LocalEnhancer<T> for Passthrough {
    fn enhance(&self, normed: &Mat<T>) -> Result<Mat<T>> {
        Ok(Mat::zeros(normed.rows(), normed.cols()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T> {
    pub norm_local: LayerNorm<T>,
    pub norm_block: LayerNorm<T>,
    pub block: DmbParams<T>,
}

impl<T: Scalar> StageParams<T> {
    pub fn init(init: &Init, name: &str, config: BlockConfig) -> Result<Self> {
        Ok(StageParams {
            norm_local: LayerNorm::new(config.d_model),
            norm_block: LayerNorm::new(config.d_model),
            block: DmbParams::init(init, &join(name, "block"), config)?,
        })
    }

    pub fn zeros(config: BlockConfig) -> Result<Self> {
        Ok(StageParams {
            norm_local: LayerNorm::new(config.d_model),
            norm_block: LayerNorm::new(config.d_model),
            block: DmbParams::zeros(config)?,
        })
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> StageParams<U> {
        StageParams {
            norm_local: self.norm_local.map(f),
            norm_block: self.norm_block.map(f),
            block: self.block.map(f),
        }
    }
}

impl<T: Scalar> Parameters<T> for StageParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.norm_local.visit(&join(prefix, "norm_local"), f);
        self.norm_block.visit(&join(prefix, "norm_block"), f);
        self.block.visit(&join(prefix, "block"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.norm_local.visit_mut(&join(prefix, "norm_local"), f);
        self.norm_block.visit_mut(&join(prefix, "norm_block"), f);
        self.block.visit_mut(&join(prefix, "block"), f);
    }
}

#[derive(Clone, Debug)]
pub struct StageOutput<T> {
    pub tokens: Mat<T>,
    pub block: BlockOutput<T>,
}

/// `x' = E(LN(x)) + x`, then `DMB(LN(x')) + x'`.
pub fn stage_forward<T: Scalar>(
    x: &Mat<T>,
    centers: &[Point<T>],
    base_index: &[usize],
    params: &StageParams<T>,
    enhancer: &dyn LocalEnhancer<T>,
) -> Result<StageOutput<T>> {
    let local = enhancer.enhance(&params.norm_local.forward(x)?)?;
    let x1 = local.add(x)?;
    let block = dmb_forward(&params.norm_block.forward(&x1)?, centers, base_index, &params.block)?;
    Ok(StageOutput {
        tokens: block.out.add(&x1)?,
        block,
    })
}

/// A stack of stages sharing the same centers and base order.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub stages: Vec<StageParams<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn init(init: &Init, config: BlockConfig, depth: usize) -> Result<Self> {
        let stages = (0..depth)
            .map(|i| StageParams::init(init, &format!("stage{i}"), config))
            .collect::<Result<_>>()?;
        Ok(Encoder { stages })
    }

    pub fn forward(
        &self,
        tokens: &Mat<T>,
        centers: &[Point<T>],
        base_index: &[usize],
        enhancer: &dyn LocalEnhancer<T>,
    ) -> Result<Vec<StageOutput<T>>> {
        let mut outs: Vec<StageOutput<T>> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let x = outs.last().map_or(tokens, |o| &o.tokens);
            outs.push(stage_forward(x, centers, base_index, stage, enhancer)?);
        }
        Ok(outs)
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> Encoder<U> {
        Encoder {
            stages: self.stages.iter().map(|s| s.map(f)).collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }
}
