//! Attention-gated Unet semantic segmentation on a small, verifiable
//! reverse-mode autodiff engine.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE_INDEX};
pub use tensor::Tensor;
