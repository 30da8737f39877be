use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub kl_beta: f64,
    pub gae_gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    /// Optimization epochs over each rollout batch (K).
    pub epochs_per_batch: usize,
    /// Sequences per minibatch (M).
    pub minibatch_size: usize,
    /// Rollouts per iteration (N).
    pub generation_batch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Weight of the value loss in the single joint objective.
    pub critic_loss_multiplier: f64,
    pub advantage_whitening: bool,
    pub iterations: usize,
    pub warmup: usize,
    pub grad_clip: bool,
    pub grad_clip_norm: f64,
    /// Minibatches per optimizer step.
    pub grad_accum: usize,
    pub value_clip: bool,
    pub value_clip_range: f64,
    pub max_new_tokens: usize,
    pub temperature: f64,
    /// Policy samples used to fit the reward normalizer.
    pub calibration_samples: usize,
    /// Give critic sets a trainable full-rank copy of the reward head.
    pub train_value_head: bool,
    /// Iterations in the trailing mean that selects the best checkpoint.
    pub best_window: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            kl_beta: 0.02,
            gae_gamma: 1.0,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            epochs_per_batch: 1,
            minibatch_size: 8,
            generation_batch: 16,
            actor_lr: 5e-4,
            critic_lr: 5e-5,
            critic_loss_multiplier: 0.1,
            advantage_whitening: true,
            iterations: 200,
            warmup: 100,
            grad_clip: true,
            grad_clip_norm: 1.0,
            grad_accum: 1,
            value_clip: false,
            value_clip_range: 0.2,
            max_new_tokens: 16,
            temperature: 1.0,
            calibration_samples: 64,
            train_value_head: true,
            best_window: 20,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("ppo: {m}")));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!(
                "clip_epsilon {} must lie in (0, 1)",
                self.clip_epsilon
            ));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.gae_gamma) {
            return bad("gae_gamma and gae_lambda must lie in [0, 1]".into());
        }
        if self.generation_batch == 0 || self.minibatch_size == 0 {
            return bad("generation_batch and minibatch_size must be positive".into());
        }
        // counted in sequences, so this also bounds M by N * T
        if self.minibatch_size > self.generation_batch {
            return bad(format!(
                "minibatch_size {} exceeds generation_batch {}",
                self.minibatch_size, self.generation_batch
            ));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.kl_beta >= 0.0 && self.critic_loss_multiplier >= 0.0) {
            return bad("kl_beta and critic_loss_multiplier must be >= 0".into());
        }
        if self.grad_accum == 0 || self.best_window == 0 || self.max_new_tokens == 0 {
            return bad("grad_accum, best_window and max_new_tokens must be positive".into());
        }
        if self.grad_clip && !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive".into());
        }
        if self.value_clip && !(self.value_clip_range > 0.0) {
            return bad("value_clip_range must be positive".into());
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0".into());
        }
        if self.calibration_samples < crate::objectives::MIN_CALIBRATION_SAMPLES {
            return bad(format!(
                "calibration_samples must be >= {}",
                crate::objectives::MIN_CALIBRATION_SAMPLES
            ));
        }
        Ok(())
    }

    pub fn minibatches_per_epoch(&self) -> usize {
        self.generation_batch.div_ceil(self.minibatch_size)
    }

    /// Optimizer steps in one iteration; a partial accumulation window is
    /// flushed at the end of the iteration.
    pub fn optimizer_steps_per_iteration(&self) -> usize {
        (self.epochs_per_batch * self.minibatches_per_epoch()).div_ceil(self.grad_accum)
    }

    pub fn total_optimizer_steps(&self) -> usize {
        self.iterations * self.optimizer_steps_per_iteration()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_count_steps() {
        let c = PpoConfig::default();
        c.validate().unwrap();
        assert_eq!(c.optimizer_steps_per_iteration(), 2);
        let odd = PpoConfig {
            generation_batch: 10,
            minibatch_size: 4,
            epochs_per_batch: 2,
            grad_accum: 4,
            ..c.clone()
        };
        assert_eq!(odd.optimizer_steps_per_iteration(), 2);
        for bad in [
            PpoConfig {
                clip_epsilon: 1.0,
                ..c.clone()
            },
            PpoConfig {
                gae_lambda: 1.5,
                ..c.clone()
            },
            PpoConfig {
                minibatch_size: 17,
                ..c.clone()
            },
            PpoConfig {
                actor_lr: 0.0,
                ..c.clone()
            },
            PpoConfig {
                calibration_samples: 8,
                ..c.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
