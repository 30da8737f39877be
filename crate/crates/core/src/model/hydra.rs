use std::collections::BTreeMap;

use hydra_tensor::checkpoint::{Checkpoint, NamedTensor};
use hydra_tensor::{Graph, ParamRef, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::adapter::{AdapterSelector, AdapterSet};
use super::ModelConfig;
use crate::accounting::alloc::record_materialization;
use crate::error::{Error, Result};
use crate::tokenizer::{Token, PAD};

const INIT_STD: f64 = 0.02;
const TRUNK_GROUP: &str = "trunk";

/// Which output heads a forward pass evaluates. The trunk runs once either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    Clm,
    Rm,
    Both,
}

impl Heads {
    fn clm(self) -> bool {
        matches!(self, Heads::Clm | Heads::Both)
    }
    fn rm(self) -> bool {
        matches!(self, Heads::Rm | Heads::Both)
    }
}

/// Rectangular batch of token ids, row-major `[batch, seq]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    tokens: Vec<Token>,
    batch: usize,
    seq: usize,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<Token>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || seq == 0 || rows.iter().any(|r| r.len() != seq) {
            return Err(Error::InvalidArgument(
                "token batch rows must be non-empty and equal length".into(),
            ));
        }
        Ok(Self {
            tokens: rows.concat(),
            batch: rows.len(),
            seq,
        })
    }

    /// Right-pads every row with [`PAD`] to the longest row.
    pub fn padded(rows: &[Vec<Token>]) -> Result<Self> {
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        let padded: Vec<Vec<Token>> = rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.resize(seq, PAD);
                r
            })
            .collect();
        Self::new(&padded)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn row(&self, b: usize) -> &[Token] {
        &self.tokens[b * self.seq..(b + 1) * self.seq]
    }
}

/// Identifies a parameter tensor inside a [`HydraModel`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    Trunk(String),
    Adapter { set: String, name: String },
}

impl ParamKey {
    pub fn path(&self) -> String {
        match self {
            ParamKey::Trunk(n) => format!("{TRUNK_GROUP}.{n}"),
            ParamKey::Adapter { set, name } => format!("adapter.{set}.{name}"),
        }
    }
}

/// Trainable leaves recorded by one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings(Vec<(ParamKey, Var)>);

impl Bindings {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn extend(&mut self, other: Bindings) {
        self.0.extend(other.0);
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamKey, Var)> {
        self.0.iter()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch * seq, vocab]`
    pub logits: Option<Var>,
    /// `[batch * seq, 1]`, one scalar per position.
    pub values: Option<Var>,
    pub bindings: Bindings,
    pub batch: usize,
    pub seq: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: ModelConfig,
    adapter_sets: Vec<AdapterMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterMeta {
    name: String,
    scaling: f64,
}

/// Decoder trunk with a causal-LM head and a scalar reward head, plus any
/// number of named adapter sets.
#[derive(Debug, PartialEq)]
pub struct HydraModel {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    adapters: BTreeMap<String, AdapterSet>,
}

impl Clone for HydraModel {
    /// A clone is a full parameter-set materialization and is counted as one.
    fn clone(&self) -> Self {
        record_materialization();
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            adapters: self.adapters.clone(),
        }
    }
}

impl HydraModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let params = trunk_layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Gaussian => {
                        let n = shape.iter().product();
                        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                        Tensor::new(shape, data).expect("shape")
                    }
                    Init::Ones => Tensor::ones(&shape),
                    Init::Zeros => Tensor::zeros(&shape),
                };
                (name, t.with_grad(true))
            })
            .collect();
        record_materialization();
        Ok(Self {
            config,
            params,
            adapters: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn trunk(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn adapter_sets(&self) -> &BTreeMap<String, AdapterSet> {
        &self.adapters
    }

    pub fn adapter_set(&self, name: &str) -> Result<&AdapterSet> {
        self.adapters
            .get(name)
            .ok_or_else(|| Error::UnknownAdapterSet(name.to_string()))
    }

    pub fn adapter_set_mut(&mut self, name: &str) -> Result<&mut AdapterSet> {
        self.adapters
            .get_mut(name)
            .ok_or_else(|| Error::UnknownAdapterSet(name.to_string()))
    }

    /// Registers a fresh adapter set. With `value_head`, the set also carries
    /// a full-rank copy of the reward head that it trains in place of the
    /// frozen base head.
    pub fn add_adapter_set(&mut self, name: &str, seed: u64, value_head: bool) -> Result<()> {
        if self.adapters.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "adapter set `{name}` already exists"
            )));
        }
        let mut set = AdapterSet::init(name, &self.config, seed);
        if value_head {
            set.set_value_head(
                self.params["rm_head.weight"].clone(),
                self.params["rm_head.bias"].clone(),
            );
        }
        self.adapters.insert(name.to_string(), set);
        Ok(())
    }

    pub fn replace_adapter_set(&mut self, set: AdapterSet) {
        self.adapters.insert(set.name.clone(), set);
    }

    pub fn set_trunk_trainable(&mut self, trainable: bool) {
        self.params
            .values_mut()
            .for_each(|t| t.requires_grad = trainable);
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
        for set in self.adapters.values_mut() {
            set.params.values_mut().for_each(Tensor::zero_grad);
        }
    }

    fn tensor_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        match key {
            ParamKey::Trunk(n) => self.params.get_mut(n),
            ParamKey::Adapter { set, name } => self.adapters.get_mut(set)?.params.get_mut(name),
        }
    }

    /// Adds the gradients recorded on `g` into the bound parameters.
    pub fn absorb_grads(&mut self, g: &Graph, bindings: &Bindings) -> Result<()> {
        for (key, var) in bindings.iter() {
            let t = self
                .tensor_mut(key)
                .ok_or_else(|| Error::InvalidArgument(format!("stale binding {}", key.path())))?;
            g.accumulate_into(*var, t)?;
        }
        Ok(())
    }

    /// Trunk parameters that currently require gradients, for the optimizer.
    pub fn trunk_param_refs(&mut self, decay: bool) -> Vec<ParamRef<'_>> {
        self.params
            .iter_mut()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, t)| ParamRef {
                name: n,
                tensor: t,
                decay,
            })
            .collect()
    }

    /// Parameters of one adapter set; never decayed.
    pub fn adapter_param_refs(&mut self, set: &str) -> Result<Vec<ParamRef<'_>>> {
        let set = self.adapter_set_mut(set)?;
        Ok(set
            .params
            .iter_mut()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, t)| ParamRef {
                name: n,
                tensor: t,
                decay: false,
            })
            .collect())
    }

    pub fn adapter_tensors_mut(&mut self, set: &str) -> Result<impl Iterator<Item = &mut Tensor>> {
        Ok(self.adapter_set_mut(set)?.params.values_mut())
    }

    pub fn trunk_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    fn validate_tokens(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: batch.seq,
                max: self.config.max_seq_len,
            });
        }
        for (i, &t) in batch.tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    position: i % batch.seq,
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// One causal trunk pass over `batch`, evaluating the requested heads.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &TokenBatch,
        selector: AdapterSelector,
        heads: Heads,
    ) -> Result<ForwardOutput> {
        self.validate_tokens(batch)?;
        let active = match selector.set_name() {
            Some(name) => Some(self.adapter_set(name)?),
            None => None,
        };
        let mut bind = Binder {
            g,
            bindings: Bindings::default(),
        };
        let cfg = &self.config;
        let (b, t, d) = (batch.batch, batch.seq, cfg.d_model);
        let (h, dh) = (cfg.n_heads, cfg.head_dim());

        let ids: Vec<usize> = batch.tokens.iter().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let tok = bind.trunk(self, "tok_emb");
        let pos = bind.trunk(self, "pos_emb");
        let e = bind.g.index_rows(tok, &ids)?;
        let p = bind.g.index_rows(pos, &positions)?;
        let mut x = bind.g.add(e, p)?;

        for l in 0..cfg.n_layers {
            let name = |s: &str| format!("layers.{l}.{s}");
            let a = self.norm(&mut bind, x, &name("ln1"))?;
            let q = self.linear(&mut bind, a, &name("attn.q"), active)?;
            let k = self.linear(&mut bind, a, &name("attn.k"), active)?;
            let v = self.linear(&mut bind, a, &name("attn.v"), active)?;
            let g = &mut *bind.g;
            let split = |g: &mut Graph, z: Var, perm: &[usize], shape: &[usize]| -> Result<Var> {
                let z = g.reshape(z, &[b, t, h, dh])?;
                let z = g.permute(z, perm)?;
                Ok(g.reshape(z, shape)?)
            };
            let q = split(g, q, &[0, 2, 1, 3], &[b * h, t, dh])?;
            let kt = split(g, k, &[0, 2, 3, 1], &[b * h, dh, t])?;
            let v = split(g, v, &[0, 2, 1, 3], &[b * h, t, dh])?;
            let scores = g.batch_matmul(q, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = g.causal_mask(scores)?;
            let probs = g.softmax(scores);
            let ctx = g.batch_matmul(probs, v)?;
            let ctx = g.reshape(ctx, &[b, h, t, dh])?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[b * t, d])?;
            let o = self.linear(&mut bind, ctx, &name("attn.o"), active)?;
            x = bind.g.add(x, o)?;

            let m = self.norm(&mut bind, x, &name("ln2"))?;
            let f = self.linear(&mut bind, m, &name("mlp.fc1"), active)?;
            let f = bind.g.gelu(f);
            let f = self.linear(&mut bind, f, &name("mlp.fc2"), active)?;
            x = bind.g.add(x, f)?;
        }
        let hidden = self.norm(&mut bind, x, "ln_f")?;

        let logits = if heads.clm() {
            let w = bind.trunk(self, "clm_head.weight");
            Some(bind.g.matmul_t(hidden, w)?)
        } else {
            None
        };
        let values = if heads.rm() {
            let (w, bias) = match active.and_then(|s| s.value_head().map(|vh| (s, vh))) {
                Some((set, (w, bias))) => (
                    bind.adapter(set, super::adapter::VALUE_HEAD_WEIGHT, w),
                    bind.adapter(set, super::adapter::VALUE_HEAD_BIAS, bias),
                ),
                None => (
                    bind.trunk(self, "rm_head.weight"),
                    bind.trunk(self, "rm_head.bias"),
                ),
            };
            let r = bind.g.matmul_t(hidden, w)?;
            Some(bind.g.add_rows(r, bias)?)
        } else {
            None
        };
        bind.g.check_finite()?;
        Ok(ForwardOutput {
            logits,
            values,
            bindings: bind.bindings,
            batch: b,
            seq: t,
        })
    }

    fn norm(&self, bind: &mut Binder<'_>, x: Var, prefix: &str) -> Result<Var> {
        let gain = bind.trunk(self, &format!("{prefix}.gain"));
        let bias = bind.trunk(self, &format!("{prefix}.bias"));
        Ok(bind.g.layer_norm(x, gain, bias)?)
    }

    /// `x W^T + b`, plus `scaling * (x A^T) B^T` when the active set adapts this projection.
    fn linear(
        &self,
        bind: &mut Binder<'_>,
        x: Var,
        target: &str,
        active: Option<&AdapterSet>,
    ) -> Result<Var> {
        let w = bind.trunk(self, &format!("{target}.weight"));
        let b = bind.trunk(self, &format!("{target}.bias"));
        let y = bind.g.matmul_t(x, w)?;
        let y = bind.g.add_rows(y, b)?;
        let Some(set) = active else { return Ok(y) };
        let Some((a, bm)) = set.pair(target) else {
            return Ok(y);
        };
        let av = bind.adapter(set, &format!("{target}.A"), a);
        let bv = bind.adapter(set, &format!("{target}.B"), bm);
        let low = bind.g.matmul_t(x, av)?;
        let delta = bind.g.matmul_t(low, bv)?;
        let delta = bind.g.scale(delta, set.scaling);
        Ok(bind.g.add(y, delta)?)
    }

    /// The adapters-off view used as reference policy and frozen reward model.
    /// Borrows this model; no parameters are copied.
    pub fn lo(&self) -> ReferenceView<'_> {
        ReferenceView { model: self }
    }

    /// Folds `scaling * B A` of the named set into the base weights, returning
    /// an adapter-free model. A value head carried by the set replaces the
    /// reward head.
    pub fn merge_adapters(&self, set_name: &str) -> Result<HydraModel> {
        let set = self.adapter_set(set_name)?;
        let mut params = self.params.clone();
        for (target, d_in, d_out) in self.config.adapter_targets() {
            let Some((a, b)) = set.pair(&target) else {
                continue;
            };
            let r = self.config.adapter_rank;
            let w = params
                .get_mut(&format!("{target}.weight"))
                .ok_or_else(|| Error::InvalidArgument(format!("missing weight for {target}")))?;
            let (ad, bd) = (a.data(), b.data());
            let wd = w.data_mut();
            for o in 0..d_out {
                for i in 0..d_in {
                    let delta: f64 = (0..r).map(|k| bd[o * r + k] * ad[k * d_in + i]).sum();
                    wd[o * d_in + i] += set.scaling * delta;
                }
            }
        }
        if let Some((w, b)) = set.value_head() {
            params.insert("rm_head.weight".into(), w.clone().with_grad(true));
            params.insert("rm_head.bias".into(), b.clone().with_grad(true));
        }
        record_materialization();
        Ok(HydraModel {
            config: self.config.clone(),
            params,
            adapters: BTreeMap::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            kind: "hydra-model".into(),
            config: self.config.clone(),
            adapter_sets: self
                .adapters
                .values()
                .map(|s| AdapterMeta {
                    name: s.name.clone(),
                    scaling: s.scaling,
                })
                .collect(),
        };
        let mut tensors: Vec<NamedTensor> = self
            .params
            .iter()
            .map(|(n, t)| NamedTensor {
                name: n.clone(),
                group: TRUNK_GROUP.into(),
                tensor: t.clone(),
            })
            .collect();
        for set in self.adapters.values() {
            tensors.extend(set.params.iter().map(|(n, t)| NamedTensor {
                name: n.clone(),
                group: format!("adapter.{}", set.name),
                tensor: t.clone(),
            }));
        }
        Checkpoint {
            metadata: serde_json::to_value(meta).expect("serializable"),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ck.metadata.clone())?;
        if meta.kind != "hydra-model" {
            return Err(Error::Data(format!(
                "checkpoint kind `{}` is not a hydra model",
                meta.kind
            )));
        }
        meta.config.validate()?;
        let mut params = BTreeMap::new();
        let mut adapters: BTreeMap<String, AdapterSet> = meta
            .adapter_sets
            .iter()
            .map(|m| {
                (
                    m.name.clone(),
                    AdapterSet {
                        name: m.name.clone(),
                        scaling: m.scaling,
                        params: BTreeMap::new(),
                    },
                )
            })
            .collect();
        for nt in &ck.tensors {
            if nt.group == TRUNK_GROUP {
                params.insert(nt.name.clone(), nt.tensor.clone());
            } else if let Some(set) = nt.group.strip_prefix("adapter.") {
                adapters
                    .get_mut(set)
                    .ok_or_else(|| Error::UnknownAdapterSet(set.to_string()))?
                    .params
                    .insert(nt.name.clone(), nt.tensor.clone());
            } else {
                return Err(Error::Data(format!(
                    "unknown parameter group `{}`",
                    nt.group
                )));
            }
        }
        for (name, shape, _) in trunk_layout(&meta.config) {
            match params.get(&name) {
                Some(p) if p.shape() == shape.as_slice() => {}
                _ => {
                    return Err(Error::Data(format!(
                        "checkpoint is missing or misshapes `{name}`"
                    )))
                }
            }
        }
        record_materialization();
        Ok(Self {
            config: meta.config,
            params,
            adapters,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Gaussian,
    Ones,
    Zeros,
}

/// Trunk parameter names and shapes in initialization order.
fn trunk_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, f) = (config.vocab_size, config.d_model, config.ffn_dim());
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Gaussian),
        (
            "pos_emb".to_string(),
            vec![config.max_seq_len, d],
            Init::Gaussian,
        ),
    ];
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        for ln in ["ln1", "ln2"] {
            out.push((p(&format!("{ln}.gain")), vec![d], Init::Ones));
            out.push((p(&format!("{ln}.bias")), vec![d], Init::Zeros));
        }
        for proj in ["q", "k", "v", "o"] {
            out.push((
                p(&format!("attn.{proj}.weight")),
                vec![d, d],
                Init::Gaussian,
            ));
            out.push((p(&format!("attn.{proj}.bias")), vec![d], Init::Zeros));
        }
        out.push((p("mlp.fc1.weight"), vec![f, d], Init::Gaussian));
        out.push((p("mlp.fc1.bias"), vec![f], Init::Zeros));
        out.push((p("mlp.fc2.weight"), vec![d, f], Init::Gaussian));
        out.push((p("mlp.fc2.bias"), vec![d], Init::Zeros));
    }
    out.push(("ln_f.gain".to_string(), vec![d], Init::Ones));
    out.push(("ln_f.bias".to_string(), vec![d], Init::Zeros));
    out.push(("clm_head.weight".to_string(), vec![v, d], Init::Gaussian));
    out.push(("rm_head.weight".to_string(), vec![1, d], Init::Gaussian));
    out.push(("rm_head.bias".to_string(), vec![1], Init::Zeros));
    out
}

struct Binder<'g> {
    g: &'g mut Graph,
    bindings: Bindings,
}

impl Binder<'_> {
    fn trunk(&mut self, model: &HydraModel, name: &str) -> Var {
        let t = &model.params[name];
        let v = self.g.param(t);
        if t.requires_grad {
            self.bindings.0.push((ParamKey::Trunk(name.to_string()), v));
        }
        v
    }

    fn adapter(&mut self, set: &AdapterSet, name: &str, t: &Tensor) -> Var {
        let v = self.g.param(t);
        if t.requires_grad {
            self.bindings.0.push((
                ParamKey::Adapter {
                    set: set.name.clone(),
                    name: name.to_string(),
                },
                v,
            ));
        }
        v
    }
}

/// Borrowed adapters-off view of a model.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceView<'a> {
    model: &'a HydraModel,
}

impl ReferenceView<'_> {
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &TokenBatch,
        heads: Heads,
    ) -> Result<ForwardOutput> {
        self.model.forward(g, batch, AdapterSelector::Off, heads)
    }

    pub fn model(&self) -> &HydraModel {
        self.model
    }
}
