//! Finite-difference checks of every training loss through a toy model.
//!
//! Each fixture builds a random two-layer model with non-zero adapters and a
//! random batch, differentiates the loss on the tape, and compares a random
//! subset of parameter coordinates against central differences.

use hydra_tensor::gradcheck::{finite_difference_coords, max_relative_error};
use hydra_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterSelector, Bindings, Heads, HydraModel, ModelConfig, ACTOR, CRITIC};
use crate::objectives::{hydra_sft_loss, rm_loss, sft_loss, LmBatch, PairBatch};
use crate::ppo::{ppo_clip_loss, value_loss};
use crate::tokenizer::{Encoded, VOCAB_SIZE};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
pub const DEFAULT_FIXTURES: usize = 100;
/// Parameter coordinates probed per fixture.
const COORDS: usize = 16;
const CLIP_EPSILON: f64 = 0.2;
/// Fixtures whose ratio lies this close to a clip edge are redrawn, since the
/// clipped surrogate is not differentiable there.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Xent,
    RmPairwise,
    HydraSft,
    PpoClip,
    Value,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Xent,
        LossKind::RmPairwise,
        LossKind::HydraSft,
        LossKind::PpoClip,
        LossKind::Value,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Xent => "xent",
            LossKind::RmPairwise => "rm_pairwise",
            LossKind::HydraSft => "hydra_sft",
            LossKind::PpoClip => "ppo_clip",
            LossKind::Value => "value",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub loss: LossKind,
    pub fixtures: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub worst_fixture: u64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
enum Slot {
    Trunk(String),
    Adapter(&'static str, String),
}

fn tensor<'a>(m: &'a HydraModel, s: &Slot) -> &'a Tensor {
    match s {
        Slot::Trunk(n) => m.param(n).expect("slot"),
        Slot::Adapter(set, n) => &m.adapter_set(set).expect("slot").params[n],
    }
}

fn tensor_mut<'a>(m: &'a mut HydraModel, s: &Slot) -> &'a mut Tensor {
    match s {
        Slot::Trunk(n) => m.param_mut(n).expect("slot"),
        Slot::Adapter(set, n) => m
            .adapter_set_mut(set)
            .expect("slot")
            .params
            .get_mut(n)
            .expect("slot"),
    }
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 6,
        adapter_rank: 2,
        adapter_alpha: 4.0,
    }
}

fn random_encoded(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Encoded {
    let len = rng.random_range(3..=cfg.max_seq_len);
    let tokens = (0..len)
        .map(|_| rng.random_range(0..cfg.vocab_size as u32 - 4))
        .collect();
    Encoded {
        tokens,
        response_start: rng.random_range(1..len),
    }
}

struct Fixture {
    model: HydraModel,
    slots: Vec<Slot>,
    loss: Box<dyn Fn(&HydraModel, &mut Graph) -> Result<(Var, Bindings)>>,
}

fn lm_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> Result<LmBatch> {
    let seqs: Vec<Encoded> = (0..n).map(|_| random_encoded(rng, cfg)).collect();
    LmBatch::new(&seqs)
}

fn fixture(kind: LossKind, seed: u64) -> Result<Fixture> {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = HydraModel::new(cfg.clone(), seed)?;
    model.add_adapter_set(ACTOR, seed.wrapping_add(1), false)?;
    model.add_adapter_set(CRITIC, seed.wrapping_add(2), true)?;
    for set in [ACTOR, CRITIC] {
        for t in model.adapter_tensors_mut(set)? {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let trunk = || {
        model
            .trunk()
            .keys()
            .map(|n| Slot::Trunk(n.clone()))
            .collect::<Vec<_>>()
    };
    let set_slots = |set: &'static str| -> Result<Vec<Slot>> {
        Ok(model
            .adapter_set(set)?
            .params
            .keys()
            .map(|n| Slot::Adapter(set, n.clone()))
            .collect())
    };
    let pair_batch = |rng: &mut ChaCha8Rng| -> Result<PairBatch> {
        Ok(PairBatch {
            winners: lm_batch(rng, &cfg, 2)?,
            losers: lm_batch(rng, &cfg, 2)?,
        })
    };
    let (slots, loss): (
        Vec<Slot>,
        Box<dyn Fn(&HydraModel, &mut Graph) -> Result<(Var, Bindings)>>,
    ) = match kind {
        LossKind::Xent => {
            let batch = lm_batch(&mut rng, &cfg, 2)?;
            (
                trunk(),
                Box::new(move |m, g| {
                    let lg = sft_loss(m, g, &batch, AdapterSelector::Off)?;
                    Ok((lg.loss, lg.bindings))
                }),
            )
        }
        LossKind::RmPairwise => {
            let batch = pair_batch(&mut rng)?;
            (
                trunk(),
                Box::new(move |m, g| {
                    let lg = rm_loss(m, g, &batch, AdapterSelector::Off)?;
                    Ok((lg.loss, lg.bindings))
                }),
            )
        }
        LossKind::HydraSft => {
            let batch = pair_batch(&mut rng)?;
            let gamma = rng.random_range(0.0..1.0);
            (
                trunk(),
                Box::new(move |m, g| {
                    let lg = hydra_sft_loss(m, g, &batch, gamma, AdapterSelector::Off)?;
                    Ok((lg.loss, lg.bindings))
                }),
            )
        }
        LossKind::PpoClip => {
            let batch = lm_batch(&mut rng, &cfg, 2)?;
            let mut g = Graph::new();
            let current = actor_logp(&model, &mut g, &batch)?;
            let current = g.value(current).to_vec();
            let (old, adv) = loop {
                let old: Vec<f64> = current
                    .iter()
                    .map(|c| c - rng.random_range(-0.4..0.4))
                    .collect();
                let near_edge = current
                    .iter()
                    .zip(&old)
                    .zip(&batch.mask)
                    .any(|((c, o), &m)| {
                        let r = (c - o).exp();
                        m && ((r - 1.0 - CLIP_EPSILON).abs() < KINK_MARGIN
                            || (r - 1.0 + CLIP_EPSILON).abs() < KINK_MARGIN)
                    });
                if !near_edge {
                    break (
                        old,
                        (0..current.len())
                            .map(|_| rng.random_range(-1.0..1.0))
                            .collect::<Vec<f64>>(),
                    );
                }
            };
            (
                set_slots(ACTOR)?,
                Box::new(move |m, g| {
                    let out = m.forward(g, &batch.tokens, AdapterSelector::Actor, Heads::Clm)?;
                    let lp = g.log_softmax(out.logits.expect("clm"));
                    let new = g.gather_last(lp, &batch.targets)?;
                    Ok((
                        ppo_clip_loss(g, new, &old, &adv, CLIP_EPSILON, &batch.mask)?,
                        out.bindings,
                    ))
                }),
            )
        }
        LossKind::Value => {
            let batch = lm_batch(&mut rng, &cfg, 2)?;
            let returns: Vec<f64> = (0..batch.mask.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            (
                set_slots(CRITIC)?,
                Box::new(move |m, g| {
                    let out = m.forward(g, &batch.tokens, AdapterSelector::Critic, Heads::Rm)?;
                    let v = out.values.expect("rm");
                    let n = g.value(v).len();
                    let v = g.reshape(v, &[n])?;
                    Ok((value_loss(g, v, &returns, &batch.mask, None)?, out.bindings))
                }),
            )
        }
    };
    Ok(Fixture { model, slots, loss })
}

fn actor_logp(m: &HydraModel, g: &mut Graph, batch: &LmBatch) -> Result<Var> {
    let out = m.forward(g, &batch.tokens, AdapterSelector::Actor, Heads::Clm)?;
    let lp = g.log_softmax(out.logits.expect("clm"));
    Ok(g.gather_last(lp, &batch.targets)?)
}

/// Worst relative error over the probed coordinates of one fixture.
pub fn check_fixture(kind: LossKind, seed: u64) -> Result<(f64, usize)> {
    let fx = fixture(kind, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // (slot, coordinate) pairs, drawn uniformly over all entries
    let sizes: Vec<usize> = fx
        .slots
        .iter()
        .map(|s| tensor(&fx.model, s).numel())
        .collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<(usize, usize)> = (0..COORDS.min(total))
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut s = 0;
            while k >= sizes[s] {
                k -= sizes[s];
                s += 1;
            }
            (s, k)
        })
        .collect();
    picks.sort_unstable();
    picks.dedup();

    let mut analytic_model = fx.model.clone();
    let mut g = Graph::new();
    let (loss, bindings) = (fx.loss)(&analytic_model, &mut g)?;
    g.backward(loss)?;
    analytic_model.zero_grads();
    analytic_model.absorb_grads(&g, &bindings)?;
    let analytic: Vec<f64> = picks
        .iter()
        .map(|&(s, i)| {
            tensor(&analytic_model, &fx.slots[s])
                .grad()
                .map_or(0.0, |gr| gr[i])
        })
        .collect();

    let base: Vec<f64> = picks
        .iter()
        .map(|&(s, i)| tensor(&fx.model, &fx.slots[s]).data()[i])
        .collect();
    let mut probe = fx.model.clone();
    let mut eval = |x: &[f64]| -> f64 {
        for (&(s, i), &v) in picks.iter().zip(x) {
            tensor_mut(&mut probe, &fx.slots[s]).data_mut()[i] = v;
        }
        let mut g = Graph::new();
        match (fx.loss)(&probe, &mut g) {
            Ok((l, _)) => g.scalar(l),
            Err(_) => f64::NAN,
        }
    };
    let coords: Vec<usize> = (0..picks.len()).collect();
    let numeric = finite_difference_coords(&mut eval, &base, STEP, &coords)?;
    Ok((max_relative_error(&analytic, &numeric), picks.len()))
}

/// Runs `fixtures` seeds per loss, starting at `seed`.
pub fn run_suite(kinds: &[LossKind], fixtures: usize, seed: u64) -> Result<Vec<GradcheckResult>> {
    if fixtures == 0 {
        return Err(Error::InvalidArgument(
            "gradcheck needs at least one fixture".into(),
        ));
    }
    kinds
        .iter()
        .map(|&kind| {
            let mut worst = (0.0f64, seed);
            let mut coordinates = 0;
            for s in seed..seed + fixtures as u64 {
                let (err, n) = check_fixture(kind, s)?;
                coordinates += n;
                if err > worst.0 || err.is_nan() {
                    worst = (err, s);
                }
            }
            Ok(GradcheckResult {
                loss: kind,
                fixtures,
                coordinates,
                max_relative_error: worst.0,
                worst_fixture: worst.1,
                passed: worst.0 < TOLERANCE,
            })
        })
        .collect()
}
