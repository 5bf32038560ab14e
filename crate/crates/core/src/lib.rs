//! Sparse-linear attention: block-sparse softmax attention over critical
//! blocks fused with linear attention over marginal blocks.

pub mod aggregation;
pub mod analysis;
pub mod backward;
pub mod check;
pub mod config;
pub mod error;
pub mod feature_maps;
pub mod finetune;
pub mod flops;
pub mod forward;
pub mod layout;
pub mod mask;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use config::SlaConfig;
pub use error::{Result, SlaError};
pub use tensor::{DType, Real, Tensor, TensorF};
