//! Heart-LoRA at desk scale: a tiny Vision Transformer with a frozen
//! backbone, LoRA adapters on attention projections, Taylor-expansion
//! head-responsiveness scoring, and responsiveness-driven per-head
//! deactivation. Includes full training, scoring, ablation, and export
//! workflows.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod lora;
pub mod model;
pub mod responsiveness;
pub mod scalar;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, TensorId};
