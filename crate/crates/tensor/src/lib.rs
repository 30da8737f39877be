//! Minimal dense-tensor engine: `f64` tensors, a recording tape with
//! reverse-mode differentiation, AdamW, a warmup/cosine schedule, a
//! finite-difference oracle and a single-file checkpoint container.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod tensor;

pub use error::{IoError, Result, TensorError};
pub use graph::{log_sigmoid, sigmoid, Graph, Var, MASK_VALUE};
pub use optim::{clip_grad_norm, global_grad_norm, lr_schedule, AdamW, AdamWConfig, ParamRef};
pub use tensor::Tensor;
