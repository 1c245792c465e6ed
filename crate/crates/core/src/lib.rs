//! Dense deformable U-shaped segmentation networks trained as a
//! three-path ensemble and fused by per-pixel majority vote.
//!
//! Everything numeric is generic over [`Scalar`] (`f32`/`f64`); the
//! `*64` aliases below are the double-precision instantiations the
//! pipeline uses.

#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod deform;
pub mod ensemble;
pub mod error;
pub mod gradsuite;
pub mod kv;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use autograd::{grad_check, GradCheck, GradReport, Graph, Var};
pub use error::{Error, Result};
pub use mask::{BinaryMask, LabelMask};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Model64 = network::Model<f64>;
pub type Model32 = network::Model<f32>;
pub type Bundle64 = ensemble::EnsembleBundle<f64>;
pub type Bundle32 = ensemble::EnsembleBundle<f32>;
