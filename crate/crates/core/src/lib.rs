//! Graph-attention classifier for side-scan sonar imagery.

pub mod autodiff;
pub mod cache;
pub mod error;
pub mod gat;
pub mod graph;
pub mod image;
pub mod knn;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
