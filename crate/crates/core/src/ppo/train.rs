use std::collections::VecDeque;

use hydra_tensor::lr_schedule;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::methods::{MinibatchStats, PpoInit, PpoMethod};
use super::rollout::collect_rollouts;
use super::stack::{AdapterSnapshot, PhaseTrace, Stack};
use super::PpoConfig;
use crate::data::GroundTruth;
use crate::error::{Error, Result};
use crate::model::GenerateOptions;
use crate::objectives::RewardNormalizer;
use crate::tokenizer::{prompt_prefix, Token};

/// One JSON-lines record per PPO iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoLogEntry {
    pub iteration: usize,
    pub phase: String,
    pub mean_reward: f64,
    pub mean_raw_reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth_reward: Option<f64>,
    pub kl_mean: f64,
    pub clip_fraction: f64,
    pub clip_loss: f64,
    pub value_loss: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub trailing_reward: f64,
    pub mean_response_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    /// Training stopped; the stack holds the state from before the failing
    /// iteration.
    Diverged {
        iteration: usize,
        reason: String,
    },
}

#[derive(Debug)]
pub struct PpoRun {
    pub stack: Stack,
    pub logs: Vec<PpoLogEntry>,
    pub normalizer: RewardNormalizer,
    pub trace: PhaseTrace,
    /// Adapters at the iteration with the best trailing mean reward.
    pub best: Option<AdapterSnapshot>,
    pub best_iteration: Option<usize>,
    pub status: RunStatus,
}

impl PpoRun {
    pub fn into_result(self) -> Result<Self> {
        match &self.status {
            RunStatus::Completed => Ok(self),
            RunStatus::Diverged { iteration, reason } => Err(Error::Diverged {
                iteration: *iteration,
                reason: reason.clone(),
            }),
        }
    }

    /// The stack with the best adapters swapped in.
    pub fn best_stack(mut self) -> Stack {
        if let Some(b) = &self.best {
            self.stack.restore(b);
        }
        self.stack
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Scores every rollout with the true reward when available.
    pub ground_truth: Option<GroundTruth>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Lays out prompts as `BOS prompt SEP`, truncating the head so that
/// `reserve` positions remain for the response.
pub fn prepare_prompts(
    prompts: &[Vec<Token>],
    max_len: usize,
    reserve: usize,
) -> Result<Vec<Vec<Token>>> {
    prompts
        .iter()
        .map(|p| {
            prompt_prefix(p, max_len, reserve).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "max_seq_len {max_len} leaves no room for {reserve} response tokens"
                ))
            })
        })
        .collect()
}

/// Cycles through a seeded shuffle of the prompt set.
struct PromptStream {
    order: Vec<usize>,
    pos: usize,
}

impl PromptStream {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Fits the reward normalizer on responses sampled from the initial actor.
pub fn calibrate_on_policy(
    stack: &Stack,
    prompts: &[Vec<Token>],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RewardNormalizer> {
    let picks: Vec<Vec<Token>> = (0..cfg.calibration_samples)
        .map(|i| prompts[i % prompts.len()].clone())
        .collect();
    let opts = GenerateOptions {
        max_new_tokens: cfg.max_new_tokens,
        temperature: cfg.temperature,
        stop_at_eos: true,
    };
    let gen = stack.generate(stack.actor, &picks, &opts, rng)?;
    RewardNormalizer::fit(&stack.score(&gen.sequences)?)
}

/// Trains `method` from `init` on `prompts` (raw prompt tokens).
///
/// Each iteration collects `N` rollouts, then runs `K` epochs of shuffled
/// minibatches. The best adapters by trailing mean reward are kept. A
/// non-finite rollout, loss or parameter stops the run and restores the
/// adapters from before the failing iteration.
pub fn train_ppo(
    method: &dyn PpoMethod,
    init: &PpoInit<'_>,
    prompts: &[Vec<Token>],
    cfg: &PpoConfig,
    opts: &TrainOptions,
    mut on_log: impl FnMut(&PpoLogEntry),
) -> Result<PpoRun> {
    cfg.validate()?;
    if !method.executable() {
        return Err(Error::NotExecutable(method.name().into()));
    }
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut stack = method.wire(init, cfg, opts.seed)?;
    let max_len = init.policy.config().max_seq_len;
    let prompts = prepare_prompts(prompts, max_len, cfg.max_new_tokens.min(max_len - 2))?;
    let normalizer = calibrate_on_policy(&stack, &prompts, cfg, &mut rng)?;

    let total_steps = cfg.total_optimizer_steps();
    let warmup = cfg.warmup.min(total_steps);
    let mut step = 0usize;
    let mut stream = PromptStream::new(prompts.len(), &mut rng);
    let mut history: VecDeque<f64> = VecDeque::new();
    let mut best_trailing = f64::NEG_INFINITY;
    let mut run = PpoRun {
        stack: Stack::new(
            vec![],
            stack.actor,
            stack.critic,
            stack.reference,
            stack.reward,
        ),
        logs: Vec::new(),
        normalizer,
        trace: PhaseTrace::default(),
        best: None,
        best_iteration: None,
        status: RunStatus::Completed,
    };

    for it in 0..cfg.iterations {
        let last_good = stack.snapshot();
        let batch_prompts: Vec<Vec<Token>> = stream
            .take(cfg.generation_batch, &mut rng)
            .into_iter()
            .map(|i| prompts[i].clone())
            .collect();
        let outcome = (|| -> Result<PpoLogEntry> {
            let (batch, phases) =
                collect_rollouts(&stack, &batch_prompts, cfg, &normalizer, &mut rng)?;
            run.trace.0.push(phases);
            let mean_reward = mean(&batch.terminal_rewards);
            history.push_back(mean_reward);
            if history.len() > cfg.best_window {
                history.pop_front();
            }
            let trailing = mean(history.make_contiguous());
            if trailing > best_trailing {
                best_trailing = trailing;
                run.best = Some(stack.snapshot());
                run.best_iteration = Some(it);
            }

            let mut sums = MinibatchStats::default();
            let mut n_mb = 0usize;
            let mut pending = 0usize;
            let (mut lr_a, mut lr_c, mut norms) = (0.0, 0.0, (0.0, 0.0));
            let mut rows: Vec<usize> = (0..batch.rows()).collect();
            let per_iter = cfg.epochs_per_batch * cfg.minibatches_per_epoch();
            for _ in 0..cfg.epochs_per_batch {
                rows.shuffle(&mut rng);
                for chunk in rows.chunks(cfg.minibatch_size) {
                    let mb = batch.select(chunk)?;
                    let s = method.accumulate(&mut stack, &mb, cfg, 1.0 / cfg.grad_accum as f64)?;
                    sums.clip_loss += s.clip_loss;
                    sums.value_loss += s.value_loss;
                    sums.clip_fraction += s.clip_fraction;
                    n_mb += 1;
                    pending += 1;
                    if pending == cfg.grad_accum || n_mb == per_iter {
                        // shifted one step so neither the first nor the last update has lr 0
                        let frac = lr_schedule(step + 1, total_steps + 1, warmup, 1.0)?;
                        lr_a = cfg.actor_lr * frac;
                        lr_c = cfg.critic_lr * frac;
                        norms = stack.step(cfg, lr_a, lr_c)?;
                        step += 1;
                        pending = 0;
                    }
                }
            }
            let d = n_mb.max(1) as f64;
            for (what, v) in [
                ("clip loss", sums.clip_loss),
                ("value loss", sums.value_loss),
            ] {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        op: "train_ppo",
                        what,
                        index: it,
                    });
                }
            }
            if !stack.adapters_finite() {
                return Err(Error::NonFinite {
                    op: "train_ppo",
                    what: "adapter parameters",
                    index: it,
                });
            }
            let ground_truth_reward = opts.ground_truth.map(|gt| {
                mean(
                    &(0..batch.rows())
                        .map(|b| gt.reward(batch.response(b)))
                        .collect::<Vec<_>>(),
                )
            });
            Ok(PpoLogEntry {
                iteration: it,
                phase: "ppo".into(),
                mean_reward,
                mean_raw_reward: mean(&batch.raw_rewards),
                ground_truth_reward,
                kl_mean: batch.kl_mean(),
                clip_fraction: sums.clip_fraction / d,
                clip_loss: sums.clip_loss / d,
                value_loss: sums.value_loss / d,
                actor_lr: lr_a,
                critic_lr: lr_c,
                actor_grad_norm: norms.0,
                critic_grad_norm: norms.1,
                trailing_reward: trailing,
                mean_response_len: mean(
                    &(0..batch.rows())
                        .map(|b| batch.response(b).len() as f64)
                        .collect::<Vec<_>>(),
                ),
            })
        })();
        match outcome {
            Ok(entry) => {
                on_log(&entry);
                run.logs.push(entry);
            }
            Err(e) if e.is_non_finite() => {
                stack.restore(&last_good);
                let reason = e.to_string();
                log::error!("iteration {it}: {reason}");
                run.status = RunStatus::Diverged {
                    iteration: it,
                    reason,
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }
    run.stack = stack;
    Ok(run)
}
