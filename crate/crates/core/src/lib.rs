//! Hierarchical efficient vision transformer for heatmap-based pose estimation,
//! with a small reverse-mode autodiff engine, an analytic cost audit and a
//! synthetic keypoint dataset.

pub mod attention;
pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heatmap;
pub mod model;
pub mod nn;
pub mod ops;
pub mod patch_embed;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use nn::ParamStore;
pub use rng::SeedTree;
pub use tensor::{Element, Tensor};
pub use model::{build_model, Architecture, HeatmapModel, Model, ModelConfig, PyramidFeatures};
