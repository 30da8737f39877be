//! PPO variants as interchangeable strategies, looked up by name.

use std::collections::BTreeMap;

use hydra_tensor::Graph;
use serde::{Deserialize, Serialize};

use super::math::{ppo_clip_loss, value_loss};
use super::rollout::{token_logprobs, Minibatch};
use super::stack::{Role, Stack};
use super::PpoConfig;
use crate::accounting::MethodKind;
use crate::error::{Error, Result};
use crate::model::{AdapterSelector, Heads, HydraModel, ACTOR, CRITIC, JOINT};

/// Checkpoints a PPO run starts from. The shared-trunk methods read only
/// `policy`, which must carry a trained reward head.
#[derive(Debug, Clone, Copy)]
pub struct PpoInit<'a> {
    pub policy: &'a HydraModel,
    pub reward: &'a HydraModel,
}

impl<'a> PpoInit<'a> {
    pub fn shared(model: &'a HydraModel) -> Self {
        Self {
            policy: model,
            reward: model,
        }
    }
}

/// Which trained checkpoint a method is initialized from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitSource {
    /// Separate SFT policy and reward model.
    SftAndRm,
    /// One jointly trained two-headed model.
    HydraSft,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MinibatchStats {
    pub clip_loss: f64,
    pub value_loss: f64,
    /// Masked tokens whose ratio left `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
}

pub trait PpoMethod: Send + Sync {
    /// Registry key, as accepted by `ppo --method`.
    fn name(&self) -> &'static str;
    fn kind(&self) -> MethodKind;
    fn init_source(&self) -> InitSource;

    /// Materializes the method's static models and adapter sets.
    fn wire(&self, init: &PpoInit<'_>, cfg: &PpoConfig, seed: u64) -> Result<Stack>;

    fn executable(&self) -> bool {
        true
    }

    /// Adds `scale`-weighted loss gradients for one minibatch to the stack.
    fn accumulate(
        &self,
        stack: &mut Stack,
        mb: &Minibatch,
        cfg: &PpoConfig,
        scale: f64,
    ) -> Result<MinibatchStats> {
        separate_accumulate(stack, mb, cfg, scale)
    }
}

fn frozen_copy(m: &HydraModel) -> HydraModel {
    let mut m = m.clone();
    m.set_trunk_trainable(false);
    m
}

fn actor_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

fn critic_seed(seed: u64) -> u64 {
    seed.wrapping_add(2)
}

fn clip_fraction(g: &Graph, new_logp: hydra_tensor::Var, mb: &Minibatch, eps: f64) -> f64 {
    let new = g.value(new_logp);
    let (hit, n) = new
        .iter()
        .zip(&mb.old_logp)
        .zip(&mb.mask)
        .filter(|(_, &m)| m)
        .fold((0usize, 0usize), |(h, n), ((a, b), _)| {
            (h + usize::from(((a - b).exp() - 1.0).abs() > eps), n + 1)
        });
    hit as f64 / n.max(1) as f64
}

fn value_clip<'a>(mb: &'a Minibatch, cfg: &PpoConfig) -> Option<(&'a [f64], f64)> {
    cfg.value_clip
        .then_some((mb.old_values.as_slice(), cfg.value_clip_range))
}

fn flat_values(g: &mut Graph, values: hydra_tensor::Var) -> Result<hydra_tensor::Var> {
    let n = g.value(values).len();
    Ok(g.reshape(values, &[n])?)
}

/// Actor and critic trained from separate passes with separate losses.
fn separate_accumulate(
    stack: &mut Stack,
    mb: &Minibatch,
    cfg: &PpoConfig,
    scale: f64,
) -> Result<MinibatchStats> {
    let mut stats = MinibatchStats::default();

    let mut g = Graph::new();
    let out = stack.forward(&mut g, stack.actor, &mb.tokens, Heads::Clm)?;
    let new_logp = token_logprobs(&mut g, out.logits.expect("clm"), &mb.targets)?;
    let loss = ppo_clip_loss(
        &mut g,
        new_logp,
        &mb.old_logp,
        &mb.advantages,
        cfg.clip_epsilon,
        &mb.mask,
    )?;
    stats.clip_loss = g.scalar(loss);
    stats.clip_fraction = clip_fraction(&g, new_logp, mb, cfg.clip_epsilon);
    let scaled = g.scale(loss, scale);
    g.backward(scaled)?;
    stack.absorb(stack.actor, &g, &out)?;

    let mut g = Graph::new();
    let out = stack.forward(&mut g, stack.critic, &mb.tokens, Heads::Rm)?;
    let v = flat_values(&mut g, out.values.expect("rm"))?;
    let loss = value_loss(&mut g, v, &mb.returns, &mb.mask, value_clip(mb, cfg))?;
    stats.value_loss = g.scalar(loss);
    let scaled = g.scale(loss, scale);
    g.backward(scaled)?;
    stack.absorb(stack.critic, &g, &out)?;
    Ok(stats)
}

/// Two adapter sets on one shared trunk; reference and reward are the
/// adapters-off view of that trunk.
pub struct HydraPpo;

impl PpoMethod for HydraPpo {
    fn name(&self) -> &'static str {
        "hydra"
    }
    fn kind(&self) -> MethodKind {
        MethodKind::HydraPpo
    }
    fn init_source(&self) -> InitSource {
        InitSource::HydraSft
    }
    fn wire(&self, init: &PpoInit<'_>, cfg: &PpoConfig, seed: u64) -> Result<Stack> {
        let mut m = frozen_copy(init.policy);
        m.add_adapter_set(ACTOR, actor_seed(seed), false)?;
        m.add_adapter_set(CRITIC, critic_seed(seed), cfg.train_value_head)?;
        let off = Role::new(0, AdapterSelector::Off);
        Ok(Stack::new(
            vec![("policy", m)],
            Role::new(0, AdapterSelector::Actor),
            Role::new(0, AdapterSelector::Critic),
            off,
            off,
        ))
    }
}

/// One shared adapter set for actor and critic, trained on
/// `L_clip + c * L_value` from a single pass.
pub struct JHydraPpo;

impl PpoMethod for JHydraPpo {
    fn name(&self) -> &'static str {
        "j-hydra"
    }
    fn kind(&self) -> MethodKind {
        MethodKind::JHydraPpo
    }
    fn init_source(&self) -> InitSource {
        InitSource::HydraSft
    }
    fn wire(&self, init: &PpoInit<'_>, cfg: &PpoConfig, seed: u64) -> Result<Stack> {
        let mut m = frozen_copy(init.policy);
        m.add_adapter_set(JOINT, actor_seed(seed), cfg.train_value_head)?;
        let joint = Role::new(0, AdapterSelector::Joint);
        let off = Role::new(0, AdapterSelector::Off);
        Ok(Stack::new(vec![("policy", m)], joint, joint, off, off))
    }
    fn accumulate(
        &self,
        stack: &mut Stack,
        mb: &Minibatch,
        cfg: &PpoConfig,
        scale: f64,
    ) -> Result<MinibatchStats> {
        let mut g = Graph::new();
        let out = stack.forward(&mut g, stack.actor, &mb.tokens, Heads::Both)?;
        let new_logp = token_logprobs(&mut g, out.logits.expect("clm"), &mb.targets)?;
        let clip = ppo_clip_loss(
            &mut g,
            new_logp,
            &mb.old_logp,
            &mb.advantages,
            cfg.clip_epsilon,
            &mb.mask,
        )?;
        let v = flat_values(&mut g, out.values.expect("rm"))?;
        let vl = value_loss(&mut g, v, &mb.returns, &mb.mask, value_clip(mb, cfg))?;
        let weighted = g.scale(vl, cfg.critic_loss_multiplier);
        let total = g.add(clip, weighted)?;
        let scaled = g.scale(total, scale);
        let stats = MinibatchStats {
            clip_loss: g.scalar(clip),
            value_loss: g.scalar(vl),
            clip_fraction: clip_fraction(&g, new_logp, mb, cfg.clip_epsilon),
        };
        g.backward(scaled)?;
        stack.absorb(stack.actor, &g, &out)?;
        Ok(stats)
    }
}

/// Separate SFT and reward models, each holding one adapter set; the
/// reference and reward are their adapters-off views.
pub struct DynamicLoraPpo;

impl PpoMethod for DynamicLoraPpo {
    fn name(&self) -> &'static str {
        "dynamic-lora"
    }
    fn kind(&self) -> MethodKind {
        MethodKind::DynamicLoraPpo
    }
    fn init_source(&self) -> InitSource {
        InitSource::SftAndRm
    }
    fn wire(&self, init: &PpoInit<'_>, cfg: &PpoConfig, seed: u64) -> Result<Stack> {
        let mut policy = frozen_copy(init.policy);
        policy.add_adapter_set(ACTOR, actor_seed(seed), false)?;
        let mut critic = frozen_copy(init.reward);
        critic.add_adapter_set(CRITIC, critic_seed(seed), cfg.train_value_head)?;
        Ok(Stack::new(
            vec![("policy", policy), ("critic", critic)],
            Role::new(0, AdapterSelector::Actor),
            Role::new(1, AdapterSelector::Critic),
            Role::new(0, AdapterSelector::Off),
            Role::new(1, AdapterSelector::Off),
        ))
    }
}

/// Four independent models: adapted actor, frozen reference, adapted
/// critic, frozen reward.
pub struct LoraPpo;

impl PpoMethod for LoraPpo {
    fn name(&self) -> &'static str {
        "lora"
    }
    fn kind(&self) -> MethodKind {
        MethodKind::LoraPpo
    }
    fn init_source(&self) -> InitSource {
        InitSource::SftAndRm
    }
    fn wire(&self, init: &PpoInit<'_>, cfg: &PpoConfig, seed: u64) -> Result<Stack> {
        let mut actor = frozen_copy(init.policy);
        actor.add_adapter_set(ACTOR, actor_seed(seed), false)?;
        let reference = frozen_copy(init.policy);
        let mut critic = frozen_copy(init.reward);
        critic.add_adapter_set(CRITIC, critic_seed(seed), cfg.train_value_head)?;
        let reward = frozen_copy(init.reward);
        Ok(Stack::new(
            vec![
                ("actor", actor),
                ("reference", reference),
                ("critic", critic),
                ("reward", reward),
            ],
            Role::new(0, AdapterSelector::Actor),
            Role::new(2, AdapterSelector::Critic),
            Role::new(1, AdapterSelector::Off),
            Role::new(3, AdapterSelector::Off),
        ))
    }
}

/// Full fine-tuning: four full models, nothing low-rank. Wired for
/// accounting only; training it is refused.
pub struct FullFtPpo;

impl PpoMethod for FullFtPpo {
    fn name(&self) -> &'static str {
        "full-ft"
    }
    fn kind(&self) -> MethodKind {
        MethodKind::FullFtPpo
    }
    fn init_source(&self) -> InitSource {
        InitSource::SftAndRm
    }
    fn executable(&self) -> bool {
        false
    }
    fn wire(&self, init: &PpoInit<'_>, _cfg: &PpoConfig, _seed: u64) -> Result<Stack> {
        let models = vec![
            ("actor", init.policy.clone()),
            ("reference", frozen_copy(init.policy)),
            ("critic", init.reward.clone()),
            ("reward", frozen_copy(init.reward)),
        ];
        let off = |m| Role::new(m, AdapterSelector::Off);
        Ok(Stack::new(models, off(0), off(2), off(1), off(3)))
    }
    fn accumulate(
        &self,
        _: &mut Stack,
        _: &Minibatch,
        _: &PpoConfig,
        _: f64,
    ) -> Result<MinibatchStats> {
        Err(Error::NotExecutable(self.name().into()))
    }
}

/// Every registered method by name.
pub fn registry() -> BTreeMap<&'static str, Box<dyn PpoMethod>> {
    let all: Vec<Box<dyn PpoMethod>> = vec![
        Box::new(LoraPpo),
        Box::new(DynamicLoraPpo),
        Box::new(HydraPpo),
        Box::new(JHydraPpo),
        Box::new(FullFtPpo),
    ];
    all.into_iter().map(|m| (m.name(), m)).collect()
}

pub fn method_by_name(name: &str) -> Result<Box<dyn PpoMethod>> {
    registry()
        .remove(name)
        .ok_or_else(|| Error::UnknownMethod(name.to_string()))
}

pub fn method_for_kind(kind: MethodKind) -> Box<dyn PpoMethod> {
    registry()
        .into_values()
        .find(|m| m.kind() == kind)
        .expect("every kind is registered")
}
