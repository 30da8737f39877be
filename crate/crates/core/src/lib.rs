//! Two-headed decoder RLHF pipeline: supervised and joint fine-tuning,
//! reward modelling, adapter-switching PPO variants, memory accounting and
//! evaluation.

pub mod accounting;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod ppo;
pub mod tokenizer;

pub use error::{Error, Result};
