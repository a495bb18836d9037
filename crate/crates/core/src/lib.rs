//! Two-stage style-based generative model for few-shot defect image synthesis.
//!
//! Stage 1 trains a compact style-based generator/discriminator pair on
//! defect-free images. Stage 2 freezes that backbone and attaches
//! defect-aware residual blocks that emit a defect mask and manipulate
//! features only inside the masked region, trained against the finetuned
//! discriminator plus a reduced-width image/mask matching discriminator.
//!
//! The numeric core is generic over the scalar type: training and
//! checkpoints use `f32`, gradient checks and metrics use `f64`.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defect;
pub mod downstream;
pub mod error;
pub mod eval;
pub mod nn;
pub mod num;
pub mod seeds;

pub use error::{Error, Result};
pub use num::Scalar;

/// Single precision tensor, the training/checkpoint scalar type.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Double precision tensor, used by gradient checks and metrics.
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
