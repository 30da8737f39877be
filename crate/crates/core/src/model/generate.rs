use std::collections::BTreeMap;

use hydra_tensor::Graph;
use rand::Rng;

use super::{AdapterSelector, Heads, HydraModel, TokenBatch};
use crate::error::{Error, Result};
use crate::tokenizer::{Token, EOS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    /// 0 means greedy decoding.
    pub temperature: f64,
    /// When false, EOS is sampled like any other token and generation runs
    /// to `max_new_tokens` (used for fixed-length latency runs).
    pub stop_at_eos: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 16,
            temperature: 1.0,
            stop_at_eos: true,
        }
    }
}

/// Sampled continuations. `logprobs[i][j]` is the log-probability of
/// response token `j` of sequence `i` under the generating selector at
/// temperature 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub sequences: Vec<Vec<Token>>,
    pub prompt_lens: Vec<usize>,
    pub logprobs: Vec<Vec<f64>>,
    /// True where the sequence ended with EOS rather than by length.
    pub ended_with_eos: Vec<bool>,
}

impl Generation {
    pub fn response(&self, i: usize) -> &[Token] {
        &self.sequences[i][self.prompt_lens[i]..]
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn sample_token<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature == 0.0 {
        // first index wins ties
        return logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0;
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let logp = log_softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

/// Autoregressive sampling. Prompts are grouped by length so every forward
/// runs on an unpadded rectangular batch; within a step, sequences draw from
/// `rng` in prompt order, so results depend only on the seed.
pub fn generate<R: Rng>(
    model: &HydraModel,
    prompts: &[Vec<Token>],
    selector: AdapterSelector,
    opts: &GenerateOptions,
    rng: &mut R,
) -> Result<Generation> {
    if !(opts.temperature >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {} < 0",
            opts.temperature
        )));
    }
    let max_len = model.config().max_seq_len;
    for p in prompts {
        if p.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        if p.len() > max_len {
            return Err(Error::SequenceTooLong {
                len: p.len(),
                max: max_len,
            });
        }
    }
    let mut sequences: Vec<Vec<Token>> = prompts.to_vec();
    let mut logprobs = vec![Vec::new(); prompts.len()];
    let mut ended = vec![false; prompts.len()];

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        groups.entry(p.len()).or_default().push(i);
    }
    for (len, members) in groups {
        let mut active = members;
        let steps = opts.max_new_tokens.min(max_len - len);
        for _ in 0..steps {
            if active.is_empty() {
                break;
            }
            let rows: Vec<Vec<Token>> = active.iter().map(|&i| sequences[i].clone()).collect();
            let batch = TokenBatch::new(&rows)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch, selector, Heads::Clm)?;
            let logits = g.value(out.logits.expect("clm head requested"));
            let (t, v) = (batch.seq(), model.config().vocab_size);
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let row = &logits[(r * t + t - 1) * v..(r * t + t) * v];
                let tok = sample_token(row, opts.temperature, rng);
                logprobs[i].push(log_softmax(row)[tok]);
                sequences[i].push(tok as Token);
                if opts.stop_at_eos && tok as Token == EOS {
                    ended[i] = true;
                } else {
                    still.push(i);
                }
            }
            active = still;
        }
    }
    Ok(Generation {
        sequences,
        prompt_lens: prompts.iter().map(Vec::len).collect(),
        logprobs,
        ended_with_eos: ended,
    })
}
