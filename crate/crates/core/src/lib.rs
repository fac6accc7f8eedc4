//! Single-stage face detector with anchor-level attention, built on a small
//! reverse-mode autodiff core.
//!
//! The differentiable parts ([`tensor`], [`losses`], [`model`], [`trainer`])
//! are generic over [`Scalar`] so the same code trains in `f32` and is
//! gradient-checked in `f64`. Pixel geometry is always `f64`.

pub mod assignment;
pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod inference_eval;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{FanError, Result};
pub use geometry::{generate_anchors, iou, nms, AnchorGrid, AnchorSpec, BBox};
pub use scalar::{DType, Scalar};
pub use tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
