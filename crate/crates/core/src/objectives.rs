//! Language-model, pairwise-reward and joint losses, and reward normalization.

use std::collections::BTreeMap;

use hydra_tensor::{log_sigmoid, Graph, Var};
use serde::{Deserialize, Serialize};

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::model::{AdapterSelector, Bindings, Heads, HydraModel, TokenBatch};
use crate::tokenizer::Encoded;

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const MIN_CALIBRATION_SAMPLES: usize = 32;
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub token_count: usize,
}

/// Right-padded sequences with next-token targets.
///
/// Row-major position `p` predicts token `p + 1`; `mask[p]` is set when that
/// token belongs to the response.
#[derive(Debug, Clone)]
pub struct LmBatch {
    pub tokens: TokenBatch,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    /// Per row, the position of the last non-padding token.
    pub last: Vec<usize>,
}

impl LmBatch {
    pub fn new(seqs: &[Encoded]) -> Result<Self> {
        let rows: Vec<Vec<_>> = seqs.iter().map(|e| e.tokens.clone()).collect();
        let tokens = TokenBatch::padded(&rows)?;
        let t = tokens.seq();
        let mut targets = vec![0; seqs.len() * t];
        let mut mask = vec![false; seqs.len() * t];
        for (b, e) in seqs.iter().enumerate() {
            if e.response_start == 0 || e.response_start > e.tokens.len() {
                return Err(Error::InvalidArgument(
                    "response_start outside the sequence".into(),
                ));
            }
            for p in 0..e.tokens.len() - 1 {
                targets[b * t + p] = e.tokens[p + 1] as usize;
                mask[b * t + p] = p + 1 >= e.response_start;
            }
        }
        Ok(Self {
            tokens,
            targets,
            mask,
            last: seqs.iter().map(|e| e.tokens.len() - 1).collect(),
        })
    }

    pub fn token_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Mean negative log-likelihood of `targets` over masked rows of `logits[R, V]`.
pub fn xent_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument("xent_loss: empty loss mask".into()));
    }
    if targets.len() != mask.len() {
        return Err(Error::Misaligned {
            op: "xent_loss",
            detail: format!("{} targets, {} mask", targets.len(), mask.len()),
        });
    }
    let logp = g.log_softmax(logits);
    let picked = g.gather_last(logp, targets)?;
    let shape = g.shape(picked).to_vec();
    let w: Vec<f64> = mask
        .iter()
        .map(|&m| if m { -1.0 / count as f64 } else { 0.0 })
        .collect();
    let w = g.leaf(&shape, w, false)?;
    let weighted = g.mul(picked, w)?;
    Ok(g.sum(weighted))
}

/// Mean of `-ln sigmoid(r_w - r_l)` over paired entries.
pub fn rm_pairwise_loss(g: &mut Graph, r_w: Var, r_l: Var) -> Result<Var> {
    let diff = g.sub(r_w, r_l)?;
    let ls = g.log_sigmoid(diff);
    let m = g.mean(ls);
    Ok(g.neg(m))
}

/// Scalar form of [`rm_pairwise_loss`].
pub fn rm_pairwise(r_w: f64, r_l: f64) -> f64 {
    -log_sigmoid(r_w - r_l)
}

/// Reward-head values at each row's last non-padding token, shape `[batch]`.
pub fn final_values(g: &mut Graph, values: Var, batch: &LmBatch) -> Result<Var> {
    let v = g.reshape(values, &[batch.tokens.batch(), batch.tokens.seq()])?;
    Ok(g.gather_last(v, &batch.last)?)
}

/// Winners and losers of a set of preference pairs, encoded side by side.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub winners: LmBatch,
    pub losers: LmBatch,
}

impl PairBatch {
    /// Pairs that do not fit in `max_len` are dropped.
    pub fn new(pairs: &[PreferencePair], max_len: usize) -> Result<Self> {
        let (w, l): (Vec<Encoded>, Vec<Encoded>) =
            pairs.iter().filter_map(|p| p.encode(max_len)).unzip();
        if w.is_empty() {
            return Err(Error::InvalidArgument(
                "no preference pair fits max_seq_len".into(),
            ));
        }
        if w.iter().any(|e| e.response_start == e.tokens.len()) {
            return Err(Error::InvalidArgument("empty winning completion".into()));
        }
        Ok(Self {
            winners: LmBatch::new(&w)?,
            losers: LmBatch::new(&l)?,
        })
    }

    pub fn len(&self) -> usize {
        self.winners.last.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A built loss graph: the scalar to differentiate, its report, and the
/// parameter leaves it touched.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub loss: Var,
    pub report: LossReport,
    pub bindings: Bindings,
}

/// Causal-LM loss on the response tokens.
pub fn sft_loss(
    model: &HydraModel,
    g: &mut Graph,
    batch: &LmBatch,
    selector: AdapterSelector,
) -> Result<LossGraph> {
    let out = model.forward(g, &batch.tokens, selector, Heads::Clm)?;
    let loss = xent_loss(g, out.logits.expect("clm"), &batch.targets, &batch.mask)?;
    let x = g.scalar(loss);
    Ok(LossGraph {
        loss,
        report: LossReport {
            total: x,
            components: [("xent".to_string(), x)].into(),
            token_count: batch.token_count(),
        },
        bindings: out.bindings,
    })
}

/// Pairwise loss on reward-head values read at the final tokens.
pub fn rm_loss(
    model: &HydraModel,
    g: &mut Graph,
    batch: &PairBatch,
    selector: AdapterSelector,
) -> Result<LossGraph> {
    let w = model.forward(g, &batch.winners.tokens, selector, Heads::Rm)?;
    let l = model.forward(g, &batch.losers.tokens, selector, Heads::Rm)?;
    let rw = final_values(g, w.values.expect("rm"), &batch.winners)?;
    let rl = final_values(g, l.values.expect("rm"), &batch.losers)?;
    let loss = rm_pairwise_loss(g, rw, rl)?;
    let x = g.scalar(loss);
    let mut bindings = w.bindings;
    bindings.extend(l.bindings);
    Ok(LossGraph {
        loss,
        report: LossReport {
            total: x,
            components: [("rm".to_string(), x)].into(),
            token_count: 0,
        },
        bindings,
    })
}

/// `xent(x, y_w) + gamma * rm(x, y_w, y_l)`. One trunk pass per completion;
/// the language-model loss sees only the winner.
pub fn hydra_sft_loss(
    model: &HydraModel,
    g: &mut Graph,
    batch: &PairBatch,
    gamma: f64,
    selector: AdapterSelector,
) -> Result<LossGraph> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma} must be >= 0"
        )));
    }
    let w = model.forward(g, &batch.winners.tokens, selector, Heads::Both)?;
    let l = model.forward(g, &batch.losers.tokens, selector, Heads::Rm)?;
    let xent = xent_loss(
        g,
        w.logits.expect("clm"),
        &batch.winners.targets,
        &batch.winners.mask,
    )?;
    let rw = final_values(g, w.values.expect("rm"), &batch.winners)?;
    let rl = final_values(g, l.values.expect("rm"), &batch.losers)?;
    let rm = rm_pairwise_loss(g, rw, rl)?;
    let weighted = g.scale(rm, gamma);
    let loss = g.add(xent, weighted)?;
    let (xv, rv) = (g.scalar(xent), g.scalar(rm));
    let mut bindings = w.bindings;
    bindings.extend(l.bindings);
    Ok(LossGraph {
        loss,
        report: LossReport {
            total: g.scalar(loss),
            components: [("xent".to_string(), xv), ("rm".to_string(), rv)].into(),
            token_count: batch.winners.token_count(),
        },
        bindings,
    })
}

/// Affine map `clip((r - bias) / scale, -1, 1)` placing calibration rewards
/// at mean zero inside `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    pub bias: f64,
    pub scale: f64,
}

impl Default for RewardNormalizer {
    fn default() -> Self {
        Self {
            bias: 0.0,
            scale: 1.0,
        }
    }
}

impl RewardNormalizer {
    pub fn fit(rewards: &[f64]) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::InvalidArgument(
                "reward normalizer needs at least one reward".into(),
            ));
        }
        if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(Error::NonFinite {
                op: "reward_normalizer",
                what: "reward",
                index: i,
            });
        }
        let n = rewards.len() as f64;
        let rough = rewards.iter().sum::<f64>() / n;
        // second pass removes the rounding left by the naive sum
        let bias = rough + rewards.iter().map(|r| r - rough).sum::<f64>() / n;
        let spread = rewards.iter().map(|r| (r - bias).abs()).fold(0.0, f64::max);
        let scale = if spread < SCALE_FLOOR {
            log::warn!("degenerate reward calibration (spread {spread:e}); using scale floor {SCALE_FLOOR:e}");
            SCALE_FLOOR
        } else {
            spread
        };
        Ok(Self { bias, scale })
    }

    pub fn apply(&self, raw: f64) -> f64 {
        ((raw - self.bias) / self.scale).clamp(-1.0, 1.0)
    }
}

/// Raw reward-head scores at each sequence's last token, in chunks.
pub fn score_sequences(
    model: &HydraModel,
    seqs: &[Vec<crate::tokenizer::Token>],
    selector: AdapterSelector,
) -> Result<Vec<f64>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(CHUNK) {
        let batch = TokenBatch::padded(chunk)?;
        let mut g = Graph::new();
        let o = model.forward(&mut g, &batch, selector, Heads::Rm)?;
        let v = g.value(o.values.expect("rm"));
        let t = batch.seq();
        for (b, s) in chunk.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidArgument(
                    "cannot score an empty sequence".into(),
                ));
            }
            out.push(v[b * t + s.len() - 1]);
        }
    }
    Ok(out)
}

/// Fits a normalizer to the frozen reward head's scores on samples drawn
/// from the policy being aligned.
pub fn calibrate_reward_normalizer(
    model: &HydraModel,
    samples: &[Vec<crate::tokenizer::Token>],
) -> Result<RewardNormalizer> {
    if samples.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "reward calibration needs >= {MIN_CALIBRATION_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    RewardNormalizer::fit(&score_sequences(model, samples, AdapterSelector::Off)?)
}
