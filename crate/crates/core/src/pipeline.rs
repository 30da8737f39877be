//! Full-parameter training stages that precede PPO: supervised fine-tuning,
//! reward modelling and joint two-headed fine-tuning.

use hydra_tensor::{clip_grad_norm, lr_schedule, AdamW, AdamWConfig, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    pairs_from_ranking, PairingRule, PreferencePair, RankedExample, DEFAULT_MAX_PAIRS,
};
use crate::error::{Error, Result};
use crate::model::{AdapterSelector, Heads, HydraModel};
use crate::objectives::{
    final_values, hydra_sft_loss, rm_loss, sft_loss, xent_loss, LmBatch, LossGraph, PairBatch,
    DEFAULT_GAMMA,
};
use crate::ppo::RunStatus;
use crate::tokenizer::{layout, Encoded};

/// Sequences per validation forward pass.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sft,
    Rm,
    HydraSft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Rm => "rm",
            Stage::HydraSft => "hydra-sft",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    /// Sequences (SFT) or pairs (RM, joint) per micro-batch.
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup: usize,
    /// Global gradient-norm clip; `0` disables it.
    pub grad_clip_norm: f64,
    /// Weight of the pairwise term in the joint loss.
    pub gamma: f64,
    pub max_pairs: usize,
    /// Pairing for reward-model training; joint training always pairs the
    /// best completion against the others.
    pub pairing: PairingRule,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            grad_accum: 1,
            epochs: 3,
            weight_decay: 0.1,
            warmup: 0,
            grad_clip_norm: 1.0,
            gamma: DEFAULT_GAMMA,
            max_pairs: DEFAULT_MAX_PAIRS,
            pairing: PairingRule::BestVsOthers,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stage: {m}")));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.epochs == 0 || self.max_pairs == 0 {
            return bad("batch_size, grad_accum, epochs and max_pairs must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.gamma >= 0.0 && self.grad_clip_norm >= 0.0) {
            return bad("weight_decay, gamma and grad_clip_norm must be >= 0");
        }
        Ok(())
    }
}

/// Held-out metrics; `score` is what best-epoch selection maximizes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rm_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_accuracy: Option<f64>,
    pub score: f64,
}

/// One JSON-lines record: an optimizer step, or an end-of-epoch validation
/// when `validation` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLogEntry {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub components: std::collections::BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationMetrics>,
}

#[derive(Debug, Clone)]
pub struct StageRun {
    /// Weights from the epoch with the best validation score.
    pub model: HydraModel,
    pub best_epoch: usize,
    pub best: ValidationMetrics,
    pub logs: Vec<StageLogEntry>,
    /// On divergence `model` holds the weights from before the failing step.
    pub status: RunStatus,
}

impl StageRun {
    pub fn into_result(self) -> Result<Self> {
        match &self.status {
            RunStatus::Completed => Ok(self),
            RunStatus::Diverged { iteration, reason } => Err(Error::Diverged {
                iteration: *iteration,
                reason: reason.clone(),
            }),
        }
    }
}

/// Training items of one stage.
enum Items {
    Seqs(Vec<Encoded>),
    Pairs(Vec<PreferencePair>),
}

impl Items {
    fn len(&self) -> usize {
        match self {
            Items::Seqs(s) => s.len(),
            Items::Pairs(p) => p.len(),
        }
    }
}

fn winners(examples: &[RankedExample], max_len: usize) -> Vec<Encoded> {
    examples
        .iter()
        .filter(|e| !e.completions.is_empty())
        .filter_map(|e| layout(&e.prompt, &e.completions[0], true, max_len))
        .filter(|e| e.response_start < e.tokens.len())
        .collect()
}

fn pairs(
    examples: &[RankedExample],
    max_pairs: usize,
    rule: PairingRule,
) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for e in examples {
        out.extend(pairs_from_ranking(e, max_pairs, rule)?);
    }
    Ok(out)
}

fn items(
    stage: Stage,
    examples: &[RankedExample],
    cfg: &StageConfig,
    max_len: usize,
) -> Result<Items> {
    Ok(match stage {
        Stage::Sft => Items::Seqs(winners(examples, max_len)),
        Stage::Rm => Items::Pairs(pairs(examples, cfg.max_pairs, cfg.pairing)?),
        Stage::HydraSft => Items::Pairs(pairs(examples, cfg.max_pairs, PairingRule::BestVsOthers)?),
    })
}

fn batch_loss(
    stage: Stage,
    model: &HydraModel,
    g: &mut Graph,
    items: &Items,
    rows: &[usize],
    cfg: &StageConfig,
) -> Result<LossGraph> {
    let max_len = model.config().max_seq_len;
    match items {
        Items::Seqs(s) => {
            let picked: Vec<Encoded> = rows.iter().map(|&i| s[i].clone()).collect();
            sft_loss(model, g, &LmBatch::new(&picked)?, AdapterSelector::Off)
        }
        Items::Pairs(p) => {
            let picked: Vec<PreferencePair> = rows.iter().map(|&i| p[i].clone()).collect();
            let batch = PairBatch::new(&picked, max_len)?;
            if stage == Stage::Rm {
                rm_loss(model, g, &batch, AdapterSelector::Off)
            } else {
                hydra_sft_loss(model, g, &batch, cfg.gamma, AdapterSelector::Off)
            }
        }
    }
}

/// Mean response-token cross-entropy of best completions.
pub fn validation_xent(model: &HydraModel, examples: &[RankedExample]) -> Result<Option<f64>> {
    let seqs = winners(examples, model.config().max_seq_len);
    let (mut nll, mut tokens) = (0.0, 0usize);
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let batch = LmBatch::new(chunk)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.tokens, AdapterSelector::Off, Heads::Clm)?;
        let loss = xent_loss(
            &mut g,
            out.logits.expect("clm"),
            &batch.targets,
            &batch.mask,
        )?;
        let n = batch.token_count();
        nll += g.scalar(loss) * n as f64;
        tokens += n;
    }
    Ok((tokens > 0).then(|| nll / tokens as f64))
}

/// Pairwise loss and the fraction of pairs whose winner outscores the loser.
pub fn pair_metrics(
    model: &HydraModel,
    selector: AdapterSelector,
    pairs: &[PreferencePair],
) -> Result<Option<(f64, f64)>> {
    let max_len = model.config().max_seq_len;
    let fitting: Vec<PreferencePair> = pairs
        .iter()
        .filter(|p| p.encode(max_len).is_some())
        .cloned()
        .collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in fitting.chunks(EVAL_CHUNK) {
        let batch = PairBatch::new(chunk, max_len)?;
        let mut g = Graph::new();
        let w = model.forward(&mut g, &batch.winners.tokens, selector, Heads::Rm)?;
        let l = model.forward(&mut g, &batch.losers.tokens, selector, Heads::Rm)?;
        let rw = final_values(&mut g, w.values.expect("rm"), &batch.winners)?;
        let rl = final_values(&mut g, l.values.expect("rm"), &batch.losers)?;
        for (a, b) in g.value(rw).iter().zip(g.value(rl)) {
            loss += crate::objectives::rm_pairwise(*a, *b);
            correct += usize::from(a > b);
        }
    }
    let n = fitting.len();
    Ok((n > 0).then(|| (loss / n as f64, correct as f64 / n as f64)))
}

/// Held-out metrics for `stage`. The selection score is `-xent` for SFT,
/// pair accuracy for the reward model and `-(xent + gamma * rm)` for joint
/// training.
pub fn validate_stage(
    stage: Stage,
    model: &HydraModel,
    val: &[RankedExample],
    cfg: &StageConfig,
) -> Result<ValidationMetrics> {
    let mut m = ValidationMetrics::default();
    if stage != Stage::Rm {
        m.xent = validation_xent(model, val)?;
    }
    if stage != Stage::Sft {
        let rule = if stage == Stage::Rm {
            cfg.pairing
        } else {
            PairingRule::BestVsOthers
        };
        if let Some((loss, acc)) = pair_metrics(
            model,
            AdapterSelector::Off,
            &pairs(val, cfg.max_pairs, rule)?,
        )? {
            m.rm_loss = Some(loss);
            m.pair_accuracy = Some(acc);
        }
    }
    m.score = match stage {
        Stage::Sft => -m.xent.unwrap_or(f64::INFINITY),
        Stage::Rm => m.pair_accuracy.unwrap_or(0.0),
        Stage::HydraSft => {
            -(m.xent.unwrap_or(f64::INFINITY) + cfg.gamma * m.rm_loss.unwrap_or(f64::INFINITY))
        }
    };
    Ok(m)
}

/// Trains every trunk parameter on `stage` for `cfg.epochs` epochs and
/// returns the weights of the epoch with the best validation score. An empty
/// validation set selects the last epoch.
/// One accumulated optimizer step; returns `(loss, components, grad_norm)`.
fn optimizer_step(
    stage: Stage,
    model: &mut HydraModel,
    opt: &mut AdamW,
    items: &Items,
    group: &[&[usize]],
    cfg: &StageConfig,
    lr: f64,
) -> Result<(f64, std::collections::BTreeMap<String, f64>, f64)> {
    let scale = 1.0 / cfg.grad_accum as f64;
    let mut components = std::collections::BTreeMap::new();
    let mut total_loss = 0.0;
    for rows in group {
        let mut g = Graph::new();
        let lg = batch_loss(stage, model, &mut g, items, rows, cfg)?;
        let scaled = g.scale(lg.loss, scale);
        g.backward(scaled)?;
        model.absorb_grads(&g, &lg.bindings)?;
        total_loss += lg.report.total / group.len() as f64;
        for (k, v) in lg.report.components {
            *components.entry(k).or_insert(0.0) += v / group.len() as f64;
        }
    }
    if !total_loss.is_finite() {
        model.zero_grads();
        return Err(Error::NonFinite {
            op: "train_stage",
            what: "loss",
            index: 0,
        });
    }
    let norm = if cfg.grad_clip_norm > 0.0 {
        clip_grad_norm(model.trunk_tensors_mut(), cfg.grad_clip_norm)
    } else {
        hydra_tensor::global_grad_norm(model.trunk().values())
    };
    opt.step(model.trunk_param_refs(true), lr)?;
    model.zero_grads();
    if let Some((name, _)) = model
        .trunk()
        .iter()
        .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
    {
        log::error!("parameter {name} left the finite range");
        return Err(Error::NonFinite {
            op: "train_stage",
            what: "trunk parameters",
            index: 0,
        });
    }
    Ok((total_loss, components, norm))
}

pub fn train_stage(
    stage: Stage,
    init: &HydraModel,
    train: &[RankedExample],
    val: &[RankedExample],
    cfg: &StageConfig,
    seed: u64,
    mut on_log: impl FnMut(&StageLogEntry),
) -> Result<StageRun> {
    cfg.validate()?;
    let mut model = init.clone();
    model.set_trunk_trainable(true);
    let items = items(stage, train, cfg, model.config().max_seq_len)?;
    if items.len() == 0 {
        return Err(Error::Data(format!(
            "no {} training items fit max_seq_len",
            stage.name()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let micro_per_epoch = items.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = micro_per_epoch.div_ceil(cfg.grad_accum);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = cfg.warmup.min(total);
    let mut logs = Vec::new();
    let mut emit = |e: StageLogEntry, logs: &mut Vec<StageLogEntry>| {
        on_log(&e);
        logs.push(e);
    };
    let mut best: Option<(ValidationMetrics, usize, HydraModel)> = None;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for group in chunks.chunks(cfg.grad_accum) {
            let before = model.clone();
            let lr = lr_schedule(step + 1, total + 1, warmup, cfg.lr)?;
            match optimizer_step(stage, &mut model, &mut opt, &items, group, cfg, lr) {
                Ok((loss, components, norm)) => {
                    step += 1;
                    emit(
                        StageLogEntry {
                            phase: stage.name().into(),
                            epoch,
                            step,
                            lr: Some(lr),
                            loss: Some(loss),
                            components,
                            grad_norm: Some(norm),
                            validation: None,
                        },
                        &mut logs,
                    );
                }
                Err(e) if e.is_non_finite() => {
                    let reason = e.to_string();
                    log::error!("{} step {step}: {reason}", stage.name());
                    let best = validate_stage(stage, &before, val, cfg)?;
                    return Ok(StageRun {
                        model: before,
                        best_epoch: epoch,
                        best,
                        logs,
                        status: RunStatus::Diverged {
                            iteration: step,
                            reason,
                        },
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let metrics = validate_stage(stage, &model, val, cfg)?;
        emit(
            StageLogEntry {
                phase: stage.name().into(),
                epoch,
                step,
                lr: None,
                loss: None,
                components: Default::default(),
                grad_norm: None,
                validation: Some(metrics.clone()),
            },
            &mut logs,
        );
        if best
            .as_ref()
            .is_none_or(|(b, _, _)| val.is_empty() || metrics.score > b.score)
        {
            best = Some((metrics, epoch, model.clone()));
        }
    }
    let (best, best_epoch, model) = best.expect("at least one epoch");
    Ok(StageRun {
        model,
        best_epoch,
        best,
        logs,
        status: RunStatus::Completed,
    })
}

pub fn train_sft(
    init: &HydraModel,
    train: &[RankedExample],
    val: &[RankedExample],
    cfg: &StageConfig,
    seed: u64,
    on_log: impl FnMut(&StageLogEntry),
) -> Result<StageRun> {
    train_stage(Stage::Sft, init, train, val, cfg, seed, on_log)
}

pub fn train_rm(
    init: &HydraModel,
    train: &[RankedExample],
    val: &[RankedExample],
    cfg: &StageConfig,
    seed: u64,
    on_log: impl FnMut(&StageLogEntry),
) -> Result<StageRun> {
    train_stage(Stage::Rm, init, train, val, cfg, seed, on_log)
}

pub fn train_hydra_sft(
    init: &HydraModel,
    train: &[RankedExample],
    val: &[RankedExample],
    cfg: &StageConfig,
    seed: u64,
    on_log: impl FnMut(&StageLogEntry),
) -> Result<StageRun> {
    train_stage(Stage::HydraSft, init, train, val, cfg, seed, on_log)
}
