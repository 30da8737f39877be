//! The two-headed decoder, its adapter sets and the adapters-off view.

mod adapter;
mod config;
mod generate;
mod hydra;

pub use adapter::{
    AdapterSelector, AdapterSet, ACTOR, CRITIC, JOINT, VALUE_HEAD_BIAS, VALUE_HEAD_WEIGHT,
};
pub use config::ModelConfig;
pub use generate::{generate, GenerateOptions, Generation};
pub use hydra::{Bindings, ForwardOutput, Heads, HydraModel, ParamKey, ReferenceView, TokenBatch};
