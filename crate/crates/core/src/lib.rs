//! Emoji-aware sentiment classification with fine-grained text/emoji attention.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix it to `f64`, which is what the CLI uses.

pub mod adam;
pub mod attention;
pub mod batch;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod dropout;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod tokenize;
pub mod trainer;
pub mod vocab;

pub use error::{FaetError, Result};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = graph::Graph<f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Model = model::FaetModel<f64>;
