//! Session-based next-item recommendation with gated graph neural networks and
//! normalized item/session embeddings, built on a small reverse-mode autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod online;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{finite_diff_check, finite_diff_check_with, GradCheck, Gradients, Graph, Stencil, Var};
pub use error::{Error, ErrorKind, Result};
pub use model::{ModelConfig, Parameters, Variant};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
pub use train::TrainConfig;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Parameters32 = Parameters<f32>;
pub type Parameters64 = Parameters<f64>;
