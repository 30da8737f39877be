//! The models a PPO method keeps in memory and the role each one plays.

use std::collections::BTreeMap;

use hydra_tensor::{clip_grad_norm, AdamW, AdamWConfig, Graph};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PpoConfig;
use crate::error::{Error, Result};
use crate::model::{
    generate, AdapterSelector, AdapterSet, GenerateOptions, Generation, Heads, HydraModel,
    TokenBatch,
};
use crate::objectives::score_sequences;
use crate::tokenizer::Token;

/// A model slot and the adapter selector it is evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub model: usize,
    pub selector: AdapterSelector,
}

impl Role {
    pub fn new(model: usize, selector: AdapterSelector) -> Self {
        Self { model, selector }
    }
}

/// What a rollout phase computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhasePurpose {
    Generate,
    GenerateAndValues,
    Values,
    Reference,
    Reward,
    ReferenceAndReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub selector: AdapterSelector,
    pub model: usize,
    pub purpose: PhasePurpose,
}

/// Selector phases of every rollout collected so far, one entry per rollout.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTrace(pub Vec<Vec<Phase>>);

impl PhaseTrace {
    pub fn selectors(&self) -> Vec<Vec<AdapterSelector>> {
        self.0
            .iter()
            .map(|r| r.iter().map(|p| p.selector).collect())
            .collect()
    }
}

/// Adapter parameters of every model in a stack; trunks are frozen during
/// PPO so this is the whole trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSnapshot(Vec<BTreeMap<String, AdapterSet>>);

/// Models held by one PPO method plus the roles wired onto them.
#[derive(Debug)]
pub struct Stack {
    pub(crate) models: Vec<HydraModel>,
    pub(crate) model_names: Vec<&'static str>,
    pub actor: Role,
    pub critic: Role,
    pub reference: Role,
    pub reward: Role,
    actor_opt: AdamW,
    critic_opt: AdamW,
}

impl Stack {
    pub fn new(
        models: Vec<(&'static str, HydraModel)>,
        actor: Role,
        critic: Role,
        reference: Role,
        reward: Role,
    ) -> Self {
        let (model_names, models) = models.into_iter().unzip();
        // adapters carry no decay
        let opt = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        Self {
            models,
            model_names,
            actor,
            critic,
            reference,
            reward,
            actor_opt: AdamW::new(opt),
            critic_opt: AdamW::new(opt),
        }
    }

    pub fn models(&self) -> impl Iterator<Item = (&'static str, &HydraModel)> {
        self.model_names.iter().copied().zip(&self.models)
    }

    pub fn model(&self, role: Role) -> &HydraModel {
        &self.models[role.model]
    }

    pub fn joint(&self) -> bool {
        self.actor == self.critic
    }

    pub fn generate<R: Rng>(
        &self,
        role: Role,
        prompts: &[Vec<Token>],
        opts: &GenerateOptions,
        rng: &mut R,
    ) -> Result<Generation> {
        generate(self.model(role), prompts, role.selector, opts, rng)
    }

    /// Raw reward-head scores under the reward role.
    pub fn score(&self, seqs: &[Vec<Token>]) -> Result<Vec<f64>> {
        score_sequences(self.model(self.reward), seqs, self.reward.selector)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        role: Role,
        batch: &TokenBatch,
        heads: Heads,
    ) -> Result<crate::model::ForwardOutput> {
        self.model(role).forward(g, batch, role.selector, heads)
    }

    pub(crate) fn absorb(
        &mut self,
        role: Role,
        g: &Graph,
        out: &crate::model::ForwardOutput,
    ) -> Result<()> {
        self.models[role.model].absorb_grads(g, &out.bindings)
    }

    pub fn snapshot(&self) -> AdapterSnapshot {
        AdapterSnapshot(
            self.models
                .iter()
                .map(|m| m.adapter_sets().clone())
                .collect(),
        )
    }

    pub fn restore(&mut self, snap: &AdapterSnapshot) {
        for (m, sets) in self.models.iter_mut().zip(&snap.0) {
            for set in sets.values() {
                m.replace_adapter_set(set.clone());
            }
        }
    }

    fn set_name(role: Role) -> Result<&'static str> {
        role.selector
            .set_name()
            .ok_or_else(|| Error::InvalidArgument("a trained role needs an adapter set".into()))
    }

    /// Clips and applies the accumulated gradients, then clears them.
    /// Returns the pre-clip gradient norms of the actor and critic sets.
    pub(crate) fn step(
        &mut self,
        cfg: &PpoConfig,
        actor_lr: f64,
        critic_lr: f64,
    ) -> Result<(f64, f64)> {
        let mut norms = [0.0; 2];
        let roles = if self.joint() {
            vec![(self.actor, actor_lr)]
        } else {
            vec![(self.actor, actor_lr), (self.critic, critic_lr)]
        };
        for (i, (role, lr)) in roles.into_iter().enumerate() {
            let set = Self::set_name(role)?;
            let model = &mut self.models[role.model];
            norms[i] = if cfg.grad_clip {
                clip_grad_norm(model.adapter_tensors_mut(set)?, cfg.grad_clip_norm)
            } else {
                hydra_tensor::global_grad_norm(model.adapter_set(set)?.params.values())
            };
            let opt = if i == 0 {
                &mut self.actor_opt
            } else {
                &mut self.critic_opt
            };
            opt.step(model.adapter_param_refs(set)?, lr)?;
        }
        if self.joint() {
            norms[1] = norms[0];
        }
        self.models.iter_mut().for_each(HydraModel::zero_grads);
        Ok((norms[0], norms[1]))
    }

    pub fn adapters_finite(&self) -> bool {
        self.models.iter().all(|m| {
            m.adapter_sets()
                .values()
                .all(|s| s.params.values().all(|t| t.is_finite()))
        })
    }
}
