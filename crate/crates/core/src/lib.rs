//! Deformable state-space sequence modelling over serialized point clouds.
//!
//! Numerical code is generic over [`Scalar`], implemented for `f32`, `f64`
//! and the forward-mode [`Dual`] number used for gradient checks. The
//! aliases below fix the common concrete types.

// `!(x > 0)` is how NaN gets rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod block;
pub mod deform;
pub mod deformable;
pub mod dual;
pub mod embedding;
pub mod error;
pub mod fft;
pub mod geometry;
pub mod gradcheck;
pub mod hilbert;
pub mod io;
pub mod model;
pub mod nn;
pub mod offset;
pub mod params;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod tpff;

pub use block::{dmb_forward, stage_forward, BlockConfig, DmbParams, Encoder, LocalEnhancer, Passthrough, StageParams};
pub use deform::{gdr_apply, gdr_weight_grad, gdr_weights, gkr, GaussianKernelParams, ReorderWeights, ResampleResult};
pub use deformable::{deformable_scan, DeformableScanConfig, DeformableScanParams};
pub use dual::{Dual, Dual64};
pub use embedding::{embed, EmbedConfig, EmbedParams, Embedding};
pub use error::{Error, Result};
pub use geometry::{Point, PointCloud};
pub use hilbert::{serialize, HilbertConfig, SerializedOrder};
pub use model::{Model, ModelConfig};
pub use params::{Init, Parameters};
pub use scalar::Scalar;
pub use tensor::Mat;

pub type Mat64 = Mat<f64>;
pub type Mat32 = Mat<f32>;
pub type Point64 = Point<f64>;
pub type Point32 = Point<f32>;
pub type PointCloud64 = PointCloud<f64>;
pub type PointCloud32 = PointCloud<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type ReorderWeights64 = ReorderWeights<f64>;
