//! Compositional zero-shot learning with mixture-of-experts LoRA adapters
//! and semantic variant alignment, on a self-contained autodiff core.

pub mod ablation;
pub mod ag;
pub mod alignment;
pub mod checkpoint;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod moe;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = ag::Tensor<f64>;
pub type Graph = ag::Graph<f64>;
pub type ParamStore = ag::ParamStore<f64>;
pub type EvaModel = model::EvaModel<f64>;
pub type Adam = trainer::Adam<f64>;
