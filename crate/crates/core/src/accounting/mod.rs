//! Static-model ledger, memory estimates and latency measurement for the
//! PPO variants.

pub mod alloc;
mod latency;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HydraModel, ModelConfig, TokenBatch};

pub use alloc::{allocation_counter, count_materializations};
pub use latency::{
    latency_csv, measure_latency, timed, LatencyPlan, LatencyRecord, LatencyTarget, PhaseTimes,
};

/// The five PPO setups of the accounting ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    FullFtPpo,
    LoraPpo,
    DynamicLoraPpo,
    JHydraPpo,
    HydraPpo,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::FullFtPpo,
        MethodKind::LoraPpo,
        MethodKind::DynamicLoraPpo,
        MethodKind::JHydraPpo,
        MethodKind::HydraPpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::FullFtPpo => "full-ft-ppo",
            MethodKind::LoraPpo => "lora-ppo",
            MethodKind::DynamicLoraPpo => "dynamic-lora-ppo",
            MethodKind::JHydraPpo => "j-hydra-ppo",
            MethodKind::HydraPpo => "hydra-ppo",
        }
    }

    /// Trunk passes that keep activations for backward in one update.
    fn trained_passes(self) -> usize {
        match self {
            MethodKind::JHydraPpo => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// `(static_models, lora_sets)` per method.
pub fn model_counts(method: MethodKind) -> (usize, usize) {
    match method {
        MethodKind::FullFtPpo => (4, 0),
        MethodKind::LoraPpo => (4, 2),
        MethodKind::DynamicLoraPpo => (2, 2),
        MethodKind::JHydraPpo => (1, 1),
        MethodKind::HydraPpo => (1, 2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodProfile {
    pub method: MethodKind,
    pub static_models: usize,
    pub lora_sets: usize,
}

impl MethodProfile {
    pub fn of(method: MethodKind) -> Self {
        let (static_models, lora_sets) = model_counts(method);
        Self {
            method,
            static_models,
            lora_sets,
        }
    }
}

/// Activation floats kept per token, per layer, per model dimension by one
/// trunk pass of the tape. Calibrated with [`calibrate_activation_coefficient`]
/// on the default toy configuration at batch 2, sequence length 16.
pub const ACTIVATION_COEFF: f64 = 49.0625;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryInputs {
    pub model_param_count: f64,
    pub precision_bytes: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub adapter_rank: usize,
}

impl MemoryInputs {
    pub fn for_config(
        config: &ModelConfig,
        precision_bytes: f64,
        batch: usize,
        seq_len: usize,
    ) -> Self {
        Self {
            model_param_count: config.param_count() as f64,
            precision_bytes,
            batch,
            seq_len,
            d_model: config.d_model,
            n_layers: config.n_layers,
            adapter_rank: config.adapter_rank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub method: MethodKind,
    pub model_bytes: f64,
    pub adapter_bytes: f64,
    pub optimizer_bytes: f64,
    pub activation_bytes: f64,
    /// Stored tensors outside the itemized components. Not modelled, so zero
    /// unless supplied by the caller.
    pub other_bytes: f64,
    pub total_bytes: f64,
    pub assumptions: MemoryInputs,
}

/// Parameters in one adapter set: per layer four `d x d` projections and the
/// two `d <-> 4d` MLP projections, each `rank * (d_in + d_out)`.
pub fn adapter_params_per_set(d_model: usize, n_layers: usize, rank: usize) -> f64 {
    (n_layers * rank * 18 * d_model) as f64
}

pub fn estimate_memory(method: MethodKind, inputs: &MemoryInputs) -> MemoryEstimate {
    estimate_memory_with_other(method, inputs, 0.0)
}

pub fn estimate_memory_with_other(
    method: MethodKind,
    inputs: &MemoryInputs,
    other_bytes: f64,
) -> MemoryEstimate {
    let (static_models, sets) = model_counts(method);
    let p = inputs.precision_bytes;
    let set_params = adapter_params_per_set(inputs.d_model, inputs.n_layers, inputs.adapter_rank);
    let model_bytes = static_models as f64 * inputs.model_param_count * p;
    let adapter_bytes = sets as f64 * set_params * p;
    let trainable = match method {
        // actor and critic trained in full
        MethodKind::FullFtPpo => 2.0 * inputs.model_param_count,
        _ => sets as f64 * set_params,
    };
    let optimizer_bytes = trainable * 12.0;
    let activation_bytes = (method.trained_passes()
        * inputs.batch
        * inputs.seq_len
        * inputs.n_layers
        * inputs.d_model) as f64
        * ACTIVATION_COEFF
        * p;
    MemoryEstimate {
        method,
        model_bytes,
        adapter_bytes,
        optimizer_bytes,
        activation_bytes,
        other_bytes,
        total_bytes: model_bytes + adapter_bytes + optimizer_bytes + activation_bytes + other_bytes,
        assumptions: *inputs,
    }
}

/// Largest batch whose estimate fits `budget_bytes`, or 0 if even batch 1 does not.
pub fn max_batch(
    method: MethodKind,
    inputs: &MemoryInputs,
    budget_bytes: f64,
    limit: usize,
) -> usize {
    let fits = |b: usize| {
        estimate_memory(
            method,
            &MemoryInputs {
                batch: b,
                ..*inputs
            },
        )
        .total_bytes
            <= budget_bytes
    };
    (1..=limit).take_while(|&b| fits(b)).last().unwrap_or(0)
}

/// Activation floats recorded by one both-heads forward of `config` on a
/// `batch x seq` input.
pub fn activation_floats(config: &ModelConfig, batch: usize, seq: usize) -> Result<usize> {
    let model = HydraModel::new(config.clone(), 0)?;
    let rows = vec![vec![0; seq]; batch];
    let mut g = hydra_tensor::Graph::new();
    model.forward(
        &mut g,
        &TokenBatch::new(&rows)?,
        crate::model::AdapterSelector::Off,
        crate::model::Heads::Both,
    )?;
    Ok(g.activation_floats())
}

/// Per-layer activation floats per token per model dimension, measured as
/// the difference between a two-layer and a one-layer tape.
pub fn calibrate_activation_coefficient(
    config: &ModelConfig,
    batch: usize,
    seq: usize,
) -> Result<f64> {
    let one = ModelConfig {
        n_layers: 1,
        ..config.clone()
    };
    let two = ModelConfig {
        n_layers: 2,
        ..config.clone()
    };
    let diff = activation_floats(&two, batch, seq)? - activation_floats(&one, batch, seq)?;
    Ok(diff as f64 / (batch * seq * config.d_model) as f64)
}
