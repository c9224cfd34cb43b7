//! Architecture hyperparameters and their validation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

fn err(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field,
        message: message.into(),
    }
}

/// Model architecture configuration.
///
/// `routed_layers` holds 1-based per-stack block indices; the same index set
/// applies to both the encoder and the decoder stack. An empty set yields a
/// fully dense model (the no-MoE ablation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// 0 means "fill in from the dataset vocabulary before building".
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub routed_layers: BTreeSet<usize>,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_task: usize,
    pub d_router_hidden: usize,
    /// Fresh random experts instead of clone-with-noise upcycling.
    pub expert_init_fresh: bool,
    /// Noise std for clone-with-noise expert init.
    pub expert_noise_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: routing alternating upper layers of each stack,
    /// five experts with top-2 activation.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_encoder_blocks: 4,
            n_decoder_blocks: 4,
            max_seq_len: 128,
            dropout_rate: 0.1,
            routed_layers: BTreeSet::from([2, 4]),
            n_experts: 5,
            top_k: 2,
            d_task: 32,
            d_router_hidden: 32,
            expert_init_fresh: false,
            expert_noise_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.vocab_size < 3 {
            return Err(err(
                "vocab_size",
                format!("must cover the 3 reserved ids, got {}", self.vocab_size),
            ));
        }
        if self.d_model == 0 {
            return Err(err("d_model", "must be positive"));
        }
        if self.n_heads == 0 {
            return Err(err("n_heads", "must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(err(
                "d_model",
                format!(
                    "must be divisible by n_heads ({} % {} != 0)",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if self.d_ff == 0 {
            return Err(err("d_ff", "must be positive"));
        }
        if self.n_encoder_blocks == 0 {
            return Err(err("n_encoder_blocks", "must be positive"));
        }
        if self.n_decoder_blocks == 0 {
            return Err(err("n_decoder_blocks", "must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(err("max_seq_len", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(err(
                "dropout_rate",
                format!("must lie in [0, 1), got {}", self.dropout_rate),
            ));
        }
        let max_block = self.n_encoder_blocks.min(self.n_decoder_blocks);
        for &layer in &self.routed_layers {
            if layer == 0 || layer > max_block {
                return Err(err(
                    "routed_layers",
                    format!(
                        "index {layer} outside 1..={max_block} (both stacks share the set)"
                    ),
                ));
            }
        }
        if !self.routed_layers.is_empty() {
            if self.n_experts == 0 {
                return Err(err("n_experts", "must be positive for routed layers"));
            }
            if self.top_k == 0 || self.top_k > self.n_experts {
                return Err(err(
                    "top_k",
                    format!(
                        "must satisfy 1 <= top_k <= n_experts, got {} with {} experts",
                        self.top_k, self.n_experts
                    ),
                ));
            }
            if self.d_task == 0 {
                return Err(err("d_task", "must be positive for routed layers"));
            }
            if self.d_router_hidden == 0 {
                return Err(err("d_router_hidden", "must be positive for routed layers"));
            }
        }
        if self.expert_noise_std < 0.0 {
            return Err(err("expert_noise_std", "must be non-negative"));
        }
        Ok(())
    }

    /// Tiny configuration used by gradient-check style tests.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_encoder_blocks: 2,
            n_decoder_blocks: 2,
            max_seq_len: 32,
            dropout_rate: 0.0,
            routed_layers: BTreeSet::from([2]),
            n_experts: 3,
            top_k: 2,
            d_task: 8,
            d_router_hidden: 8,
            expert_init_fresh: false,
            expert_noise_std: 0.02,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_with_vocab_is_valid() {
        let mut cfg = ModelConfig::default();
        cfg.vocab_size = 100;
        cfg.validate().unwrap();
    }

    #[test]
    fn errors_name_the_offending_field() {
        let mut cfg = ModelConfig::default();
        cfg.vocab_size = 100;
        cfg.d_model = 65;
        let e = cfg.validate().unwrap_err();
        assert_eq!(e.field, "d_model");

        let mut cfg = ModelConfig::default();
        cfg.vocab_size = 100;
        cfg.routed_layers = BTreeSet::from([9]);
        assert_eq!(cfg.validate().unwrap_err().field, "routed_layers");

        let mut cfg = ModelConfig::default();
        cfg.vocab_size = 100;
        cfg.top_k = 9;
        assert_eq!(cfg.validate().unwrap_err().field, "top_k");

        let mut cfg = ModelConfig::default();
        cfg.vocab_size = 0;
        assert_eq!(cfg.validate().unwrap_err().field, "vocab_size");
    }

    #[test]
    fn empty_routed_layers_skips_moe_checks() {
        let mut cfg = ModelConfig::default();
        cfg.vocab_size = 10;
        cfg.routed_layers.clear();
        cfg.n_experts = 0;
        cfg.top_k = 0;
        cfg.validate().unwrap();
    }

    #[test]
    fn serde_roundtrip() {
        let mut cfg = ModelConfig::default();
        cfg.vocab_size = 42;
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
