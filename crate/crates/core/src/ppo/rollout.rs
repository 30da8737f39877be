use hydra_tensor::{Graph, Var};
use rand::Rng;

use super::math::{gae, shaped_rewards, whiten};
use super::stack::{Phase, PhasePurpose, Role, Stack};
use super::PpoConfig;
use crate::error::{Error, Result};
use crate::model::{GenerateOptions, Heads, TokenBatch};
use crate::objectives::RewardNormalizer;
use crate::tokenizer::Token;

/// One iteration's experience. Every per-token buffer is flat `[batch * seq]`
/// and position `p` of a row describes the action that emitted token `p + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub tokens: TokenBatch,
    pub response_start: Vec<usize>,
    pub lens: Vec<usize>,
    pub ended_with_eos: Vec<bool>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub old_logp: Vec<f64>,
    pub ref_logp: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Reward-head score at each sequence's last token.
    pub raw_rewards: Vec<f64>,
    /// `raw_rewards` after normalization and clipping.
    pub terminal_rewards: Vec<f64>,
}

impl RolloutBatch {
    pub fn rows(&self) -> usize {
        self.tokens.batch()
    }

    pub fn seq(&self) -> usize {
        self.tokens.seq()
    }

    pub fn sequence(&self, b: usize) -> &[Token] {
        &self.tokens.row(b)[..self.lens[b]]
    }

    pub fn response(&self, b: usize) -> &[Token] {
        &self.tokens.row(b)[self.response_start[b]..self.lens[b]]
    }

    fn row_range(&self, b: usize) -> std::ops::Range<usize> {
        b * self.seq()..(b + 1) * self.seq()
    }

    /// Gathers the listed rows into flat buffers for a minibatch.
    pub fn select(&self, rows: &[usize]) -> Result<Minibatch> {
        let pick = |v: &[f64]| {
            rows.iter()
                .flat_map(|&b| v[self.row_range(b)].iter().copied())
                .collect::<Vec<_>>()
        };
        let token_rows: Vec<Vec<Token>> =
            rows.iter().map(|&b| self.tokens.row(b).to_vec()).collect();
        Ok(Minibatch {
            tokens: TokenBatch::new(&token_rows)?,
            targets: rows
                .iter()
                .flat_map(|&b| self.targets[self.row_range(b)].iter().copied())
                .collect(),
            mask: rows
                .iter()
                .flat_map(|&b| self.mask[self.row_range(b)].iter().copied())
                .collect(),
            old_logp: pick(&self.old_logp),
            old_values: pick(&self.values),
            advantages: pick(&self.advantages),
            returns: pick(&self.returns),
        })
    }

    pub fn masked_mean(&self, v: &[f64]) -> f64 {
        let (s, n) = v
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Mean per-token `actor - reference` log-probability gap.
    pub fn kl_mean(&self) -> f64 {
        let gap: Vec<f64> = self
            .old_logp
            .iter()
            .zip(&self.ref_logp)
            .map(|(a, r)| a - r)
            .collect();
        self.masked_mean(&gap)
    }
}

#[derive(Debug, Clone)]
pub struct Minibatch {
    pub tokens: TokenBatch,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub old_logp: Vec<f64>,
    pub old_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Log-probabilities of `targets` under `logits[R, V]`, as a graph node `[R]`.
pub(crate) fn token_logprobs(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits);
    Ok(g.gather_last(lp, targets)?)
}

fn check_finite(phase: &'static str, xs: &[f64], mask: &[bool]) -> Result<()> {
    match xs.iter().zip(mask).position(|(x, &m)| m && !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            op: "collect_rollouts",
            what: phase,
            index,
        }),
        None => Ok(()),
    }
}

/// Runs the selector phases of one rollout: generate with the actor, read
/// values with the critic, then the reference log-probs and the reward with
/// adapters as wired (off for the shared-trunk methods). Phases that share a
/// role are fused into one pass.
pub fn collect_rollouts<R: Rng>(
    stack: &Stack,
    prompts: &[Vec<Token>],
    cfg: &PpoConfig,
    normalizer: &RewardNormalizer,
    rng: &mut R,
) -> Result<(RolloutBatch, Vec<Phase>)> {
    let opts = GenerateOptions {
        max_new_tokens: cfg.max_new_tokens,
        temperature: cfg.temperature,
        stop_at_eos: true,
    };
    collect_rollouts_with(stack, prompts, cfg, &opts, normalizer, rng)
}

/// [`collect_rollouts`] with explicit generation options.
pub fn collect_rollouts_with<R: Rng>(
    stack: &Stack,
    prompts: &[Vec<Token>],
    cfg: &PpoConfig,
    opts: &GenerateOptions,
    normalizer: &RewardNormalizer,
    rng: &mut R,
) -> Result<(RolloutBatch, Vec<Phase>)> {
    let mut phases = Vec::new();
    let gen = stack.generate(stack.actor, prompts, opts, rng)?;
    let joint = stack.joint();
    phases.push(Phase {
        selector: stack.actor.selector,
        model: stack.actor.model,
        purpose: if joint {
            PhasePurpose::GenerateAndValues
        } else {
            PhasePurpose::Generate
        },
    });

    let tokens = TokenBatch::padded(&gen.sequences)?;
    let (b, t) = (tokens.batch(), tokens.seq());
    let lens: Vec<usize> = gen.sequences.iter().map(Vec::len).collect();
    let mut targets = vec![0usize; b * t];
    let mut mask = vec![false; b * t];
    let mut old_logp = vec![0.0; b * t];
    for (r, seq) in gen.sequences.iter().enumerate() {
        let rs = gen.prompt_lens[r];
        if seq.len() == rs {
            return Err(Error::InvalidArgument(
                "prompt leaves no room for a response".into(),
            ));
        }
        for j in 1..seq.len() {
            targets[r * t + j - 1] = seq[j] as usize;
        }
        for j in rs..seq.len() {
            mask[r * t + j - 1] = true;
            old_logp[r * t + j - 1] = gen.logprobs[r][j - rs];
        }
    }

    let values_of = |role: Role| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = stack.forward(&mut g, role, &tokens, Heads::Rm)?;
        Ok(g.value(out.values.expect("rm")).to_vec())
    };
    let values = values_of(stack.critic)?;
    if !joint {
        phases.push(Phase {
            selector: stack.critic.selector,
            model: stack.critic.model,
            purpose: PhasePurpose::Values,
        });
    }
    check_finite("values", &values, &mask)?;

    let fused = stack.reference == stack.reward;
    let mut g = Graph::new();
    let heads = if fused { Heads::Both } else { Heads::Clm };
    let out = stack.forward(&mut g, stack.reference, &tokens, heads)?;
    let lp = token_logprobs(&mut g, out.logits.expect("clm"), &targets)?;
    let ref_logp = g.value(lp).to_vec();
    let reward_values = if fused {
        phases.push(Phase {
            selector: stack.reference.selector,
            model: stack.reference.model,
            purpose: PhasePurpose::ReferenceAndReward,
        });
        g.value(out.values.expect("rm")).to_vec()
    } else {
        phases.push(Phase {
            selector: stack.reference.selector,
            model: stack.reference.model,
            purpose: PhasePurpose::Reference,
        });
        phases.push(Phase {
            selector: stack.reward.selector,
            model: stack.reward.model,
            purpose: PhasePurpose::Reward,
        });
        values_of(stack.reward)?
    };
    check_finite("reference log-probs", &ref_logp, &mask)?;
    let raw_rewards: Vec<f64> = (0..b).map(|r| reward_values[r * t + lens[r] - 1]).collect();
    check_finite("rewards", &raw_rewards, &vec![true; b])?;
    let terminal_rewards: Vec<f64> = raw_rewards.iter().map(|&x| normalizer.apply(x)).collect();

    let mut rewards = vec![0.0; b * t];
    let mut advantages = vec![0.0; b * t];
    let mut returns = vec![0.0; b * t];
    for r in 0..b {
        let span = r * t..(r + 1) * t;
        let rw = shaped_rewards(
            &old_logp[span.clone()],
            &ref_logp[span.clone()],
            terminal_rewards[r],
            &mask[span.clone()],
            cfg.kl_beta,
        )?;
        let (adv, ret) = gae(
            &rw,
            &values[span.clone()],
            cfg.gae_gamma,
            cfg.gae_lambda,
            &mask[span.clone()],
        )?;
        rewards[span.clone()].copy_from_slice(&rw);
        advantages[span.clone()].copy_from_slice(&adv);
        returns[span].copy_from_slice(&ret);
    }
    if cfg.advantage_whitening {
        whiten(&mut advantages, &mask);
    }
    check_finite("advantages", &advantages, &mask)?;

    Ok((
        RolloutBatch {
            tokens,
            response_start: gen.prompt_lens.clone(),
            lens,
            ended_with_eos: gen.ended_with_eos,
            targets,
            mask,
            old_logp,
            ref_logp,
            values,
            rewards,
            advantages,
            returns,
            raw_rewards,
            terminal_rewards,
        },
        phases,
    ))
}
