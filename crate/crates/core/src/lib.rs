//! Time-series forecasting with semantic prototypes, variational anomaly
//! decomposition and recurrent adapters on a frozen transformer backbone.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod forecast;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod runs;
pub mod scalar;
pub mod training;
pub mod tscc;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
