//! Temporal contextualization for video-text alignment on a small
//! reverse-mode autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the double-precision variants used for
//! training and gradient checks.

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod error;
pub mod io;
pub mod macs;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;
pub mod viz;

pub use autodiff::{Gradients, Graph, Var};
pub use config::{AggregationMethod, ModelConfig, TcLayers, TextConfig, VisionConfig, VpInit};
pub use error::{Error, Result};
pub use params::{ensemble_weights, Bound, ParamStore, WeightSnapshot};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Params64 = ParamStore<f64>;
pub type Params32 = ParamStore<f32>;
pub type Clip64 = vision::VideoClip<f64>;
