use std::collections::BTreeMap;

use hydra_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;

pub const ACTOR: &str = "actor";
pub const CRITIC: &str = "critic";
pub const JOINT: &str = "joint";

pub const VALUE_HEAD_WEIGHT: &str = "value_head.weight";
pub const VALUE_HEAD_BIAS: &str = "value_head.bias";

/// Which adapter set (if any) participates in a forward pass. Passed per
/// call and never stored on the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdapterSelector {
    /// Adapters ignored: the frozen reference / reward view.
    Off,
    Actor,
    Critic,
    /// The single shared set of the joined variant.
    Joint,
}

impl AdapterSelector {
    pub fn set_name(self) -> Option<&'static str> {
        match self {
            AdapterSelector::Off => None,
            AdapterSelector::Actor => Some(ACTOR),
            AdapterSelector::Critic => Some(CRITIC),
            AdapterSelector::Joint => Some(JOINT),
        }
    }
}

/// A named collection of low-rank deltas, one `(A, B)` pair per adapted
/// projection, plus an optional full-rank value head that replaces the
/// base reward head while the set is active.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub name: String,
    pub scaling: f64,
    /// `"{target}.A"` is `[rank, d_in]`, `"{target}.B"` is `[d_out, rank]`.
    pub params: BTreeMap<String, Tensor>,
}

impl AdapterSet {
    /// `B` starts at zero so the adapted model computes exactly the base
    /// function; `A` is Gaussian with variance `1 / d_in`.
    pub fn init(name: &str, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.adapter_rank;
        let mut params = BTreeMap::new();
        for (target, d_in, d_out) in config.adapter_targets() {
            let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("positive std");
            let a: Vec<f64> = (0..r * d_in).map(|_| normal.sample(&mut rng)).collect();
            params.insert(
                format!("{target}.A"),
                Tensor::new(vec![r, d_in], a)
                    .expect("shape")
                    .with_grad(true),
            );
            params.insert(
                format!("{target}.B"),
                Tensor::zeros(&[d_out, r]).with_grad(true),
            );
        }
        Self {
            name: name.to_string(),
            scaling: config.adapter_scaling(),
            params,
        }
    }

    pub fn pair(&self, target: &str) -> Option<(&Tensor, &Tensor)> {
        Some((
            self.params.get(&format!("{target}.A"))?,
            self.params.get(&format!("{target}.B"))?,
        ))
    }

    pub fn value_head(&self) -> Option<(&Tensor, &Tensor)> {
        Some((
            self.params.get(VALUE_HEAD_WEIGHT)?,
            self.params.get(VALUE_HEAD_BIAS)?,
        ))
    }

    pub fn set_value_head(&mut self, weight: Tensor, bias: Tensor) {
        self.params
            .insert(VALUE_HEAD_WEIGHT.into(), weight.with_grad(true));
        self.params
            .insert(VALUE_HEAD_BIAS.into(), bias.with_grad(true));
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params
            .values_mut()
            .for_each(|t| t.requires_grad = trainable);
    }

    pub fn low_rank_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| !k.starts_with("value_head"))
            .map(|(_, t)| t.numel())
            .sum()
    }
}
