//! Few-shot anomaly detection over frozen vision-language features: prompt
//! induction from support images, patch/prompt hypergraphs, hypergraph
//! convolution, map fusion, training and evaluation.

// `!(x > 0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod feature_io;
pub mod hypergraph;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod reasoning;
pub mod scalar;
pub mod semantic;
pub mod similarity;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type FeatureGridF32 = feature_io::FeatureGrid<f32>;
pub type FeatureGridF64 = feature_io::FeatureGrid<f64>;
pub type TaskF32 = feature_io::Task<f32>;
pub type TaskF64 = feature_io::Task<f64>;
pub type HypergraphF32 = hypergraph::Hypergraph<f32>;
pub type HypergraphF64 = hypergraph::Hypergraph<f64>;
pub type ModelParamsF32 = model::ModelParams<f32>;
pub type ModelParamsF64 = model::ModelParams<f64>;
pub type AnomalyMapsF32 = inference::AnomalyMaps<f32>;
pub type AnomalyMapsF64 = inference::AnomalyMaps<f64>;
