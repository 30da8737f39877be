use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
}

impl Default for ModelConfig {
    /// Desk-scale byte-level model.
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 32,
            adapter_rank: 4,
            adapter_alpha: 8.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("vocab_size, d_model, n_layers and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.adapter_rank == 0 {
            return bad("adapter_rank must be >= 1".into());
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be >= 2".into());
        }
        if !(self.adapter_alpha > 0.0) {
            return bad("adapter_alpha must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Multiplier applied to every low-rank delta.
    pub fn adapter_scaling(&self) -> f64 {
        self.adapter_alpha / self.adapter_rank as f64
    }

    /// Projections that carry adapters, as `(name, d_in, d_out)`.
    pub fn adapter_targets(&self) -> Vec<(String, usize, usize)> {
        let (d, f) = (self.d_model, self.ffn_dim());
        let mut out = Vec::new();
        for l in 0..self.n_layers {
            for p in ["q", "k", "v", "o"] {
                out.push((format!("layers.{l}.attn.{p}"), d, d));
            }
            out.push((format!("layers.{l}.mlp.fc1"), d, f));
            out.push((format!("layers.{l}.mlp.fc2"), f, d));
        }
        out
    }

    /// Number of trunk parameters, both heads included.
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.ffn_dim());
        let per_layer = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        v * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + v * d + d + 1
    }

    /// Parameters in one adapter set, excluding any value head.
    pub fn adapter_param_count(&self) -> usize {
        self.adapter_targets()
            .iter()
            .map(|(_, i, o)| self.adapter_rank * (i + o))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad_heads = ModelConfig {
            n_heads: 5,
            ..Default::default()
        };
        assert!(bad_heads.validate().is_err());
        let bad_rank = ModelConfig {
            adapter_rank: 0,
            ..Default::default()
        };
        assert!(bad_rank.validate().is_err());
        let bad_len = ModelConfig {
            max_seq_len: 1,
            ..Default::default()
        };
        assert!(bad_len.validate().is_err());
    }

    #[test]
    fn adapter_targets_cover_all_block_projections() {
        let c = ModelConfig {
            n_layers: 3,
            ..Default::default()
        };
        assert_eq!(c.adapter_targets().len(), 18);
        assert_eq!(c.adapter_param_count(), 3 * c.adapter_rank * 18 * c.d_model);
    }
}
