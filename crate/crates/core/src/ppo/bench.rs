//! One PPO iteration at a fixed shape, for latency measurement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::methods::{PpoInit, PpoMethod};
use super::rollout::collect_rollouts_with;
use super::stack::Stack;
use super::PpoConfig;
use crate::accounting::{timed, LatencyTarget, MethodKind, PhaseTimes};
use crate::error::{Error, Result};
use crate::model::GenerateOptions;
use crate::objectives::RewardNormalizer;
use crate::tokenizer::{Token, BOS, SEP};

/// A wired stack that runs rollout plus one optimizer step per call.
/// Every response is generated to full length so each call processes
/// exactly `batch` sequences of `seq_len` tokens.
pub struct PpoBench {
    method: Box<dyn PpoMethod>,
    stack: Stack,
    cfg: PpoConfig,
    normalizer: RewardNormalizer,
    rng: ChaCha8Rng,
}

impl PpoBench {
    pub fn new(
        method: Box<dyn PpoMethod>,
        init: &PpoInit<'_>,
        cfg: &PpoConfig,
        seed: u64,
    ) -> Result<Self> {
        if !method.executable() {
            return Err(Error::NotExecutable(method.name().into()));
        }
        let stack = method.wire(init, cfg, seed)?;
        Ok(Self {
            method,
            stack,
            cfg: cfg.clone(),
            normalizer: RewardNormalizer::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }
}

/// `BOS filler SEP` taking half of `seq_len` (at least 3 tokens).
fn bench_prompt(seq_len: usize) -> Vec<Token> {
    let len = (seq_len / 2).max(3);
    let mut p = vec![BOS];
    p.extend((0..len - 2).map(|i| Token::from(b'a' + (i % 26) as u8)));
    p.push(SEP);
    p
}

impl LatencyTarget for PpoBench {
    fn method(&self) -> MethodKind {
        self.method.kind()
    }

    fn run(&mut self, seq_len: usize, batch: usize) -> Result<PhaseTimes> {
        let max_len = self.stack.model(self.stack.actor).config().max_seq_len;
        if seq_len > max_len || seq_len < 4 || batch == 0 {
            return Err(Error::InvalidArgument(format!(
                "bench shape {batch}x{seq_len} outside 1..,4..={max_len}"
            )));
        }
        let prompt = bench_prompt(seq_len);
        let prompts = vec![prompt.clone(); batch];
        let opts = GenerateOptions {
            max_new_tokens: seq_len - prompt.len(),
            temperature: self.cfg.temperature,
            stop_at_eos: false,
        };
        let (rollout, inference) = timed(|| {
            collect_rollouts_with(
                &self.stack,
                &prompts,
                &self.cfg,
                &opts,
                &self.normalizer,
                &mut self.rng,
            )
        });
        let (batch, _) = rollout?;
        let rows: Vec<usize> = (0..batch.rows()).collect();
        let mb = batch.select(&rows)?;
        let (stepped, update) = timed(|| -> Result<()> {
            self.method
                .accumulate(&mut self.stack, &mb, &self.cfg, 1.0)?;
            self.stack
                .step(&self.cfg, self.cfg.actor_lr, self.cfg.critic_lr)?;
            Ok(())
        });
        stepped?;
        Ok(PhaseTimes { inference, update })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HydraModel, ModelConfig};
    use crate::ppo::method_by_name;

    #[test]
    fn runs_every_executable_method_at_full_length() {
        let cfg = ModelConfig {
            max_seq_len: 16,
            ..ModelConfig::default()
        };
        let m = HydraModel::new(cfg, 3).unwrap();
        for name in ["hydra", "j-hydra", "lora", "dynamic-lora"] {
            let mut b = PpoBench::new(
                method_by_name(name).unwrap(),
                &PpoInit::shared(&m),
                &PpoConfig::default(),
                1,
            )
            .unwrap();
            let t = b.run(12, 2).unwrap();
            assert!(t.inference > 0.0 && t.update > 0.0, "{name}");
        }
        assert!(PpoBench::new(
            method_by_name("full-ft").unwrap(),
            &PpoInit::shared(&m),
            &PpoConfig::default(),
            1
        )
        .is_err());
    }
}
