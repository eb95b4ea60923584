//! Transformer shape configuration and shipped presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a decoder-style transformer. `embedding_size` is the inner width
/// of the feed-forward block (four times `hidden_size` in every preset).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention_heads: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub sequence_length: usize,
    pub vocab_size: usize,
    pub embedding_size: usize,
    /// Replace every dense feed-forward block with a top-1 mixture of experts
    /// holding one expert per worker.
    #[serde(default)]
    pub moe: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub config: ModelConfig,
    /// Too large to execute numerically; usable for analytic memory tables only.
    pub analytic_only: bool,
}

const fn shape(
    heads: usize,
    hidden: usize,
    layers: usize,
    seq: usize,
    vocab: usize,
    emb: usize,
) -> ModelConfig {
    ModelConfig {
        attention_heads: heads,
        hidden_size: hidden,
        layers,
        sequence_length: seq,
        vocab_size: vocab,
        embedding_size: emb,
        moe: false,
    }
}

pub fn presets() -> Vec<Preset> {
    let analytic = |name, config| Preset {
        name,
        config,
        analytic_only: true,
    };
    vec![
        analytic("gpt2-117m", shape(16, 768, 12, 512, 50257, 3072)),
        analytic("bert-large-340m", shape(16, 1024, 24, 512, 30522, 4096)),
        analytic("gpt2-500m", shape(16, 1280, 20, 1024, 50257, 5120)),
        analytic("gpt2-large-774m", shape(16, 1280, 32, 1024, 50257, 5120)),
        analytic("gpt2-xl-1.5b", shape(16, 1600, 48, 1024, 50257, 6400)),
        analytic("gpt2-neo-2.7b", shape(16, 2560, 32, 1024, 50257, 10240)),
        Preset {
            name: "toy",
            config: ModelConfig::toy(),
            analytic_only: false,
        },
        Preset {
            name: "toy-moe",
            config: ModelConfig {
                moe: true,
                ..ModelConfig::toy()
            },
            analytic_only: false,
        },
    ]
}

pub fn preset(name: &str) -> Option<Preset> {
    presets().into_iter().find(|p| p.name == name)
}

impl ModelConfig {
    /// Scaled-down GPT-2 shape used for numerical runs.
    pub const fn toy() -> Self {
        shape(4, 32, 2, 16, 64, 128)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.attention_heads
    }

    /// Checks every divisibility precondition of sharding over `n` workers.
    pub fn validate(&self, n: usize) -> Result<()> {
        let nonzero = [
            ("attention_heads", self.attention_heads),
            ("hidden_size", self.hidden_size),
            ("sequence_length", self.sequence_length),
            ("vocab_size", self.vocab_size),
            ("embedding_size", self.embedding_size),
        ];
        for (name, v) in nonzero {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if n == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if !self.hidden_size.is_multiple_of(self.attention_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by attention_heads {}",
                self.hidden_size, self.attention_heads
            )));
        }
        // Heads need not divide `n`: attention then shards its projections by column.
        let divisible = [
            ("hidden_size", self.hidden_size),
            ("vocab_size", self.vocab_size),
            ("embedding_size", self.embedding_size),
        ];
        for (name, v) in divisible {
            if v % n != 0 {
                return Err(Error::Config(format!(
                    "{name} {v} is not divisible by {n} workers; pick a worker count that divides {v}"
                )));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count; a mixture-of-experts model has `experts` experts per block.
    pub fn param_count(&self, experts: usize) -> u64 {
        let (h, f, v) = (
            self.hidden_size as u64,
            self.embedding_size as u64,
            self.vocab_size as u64,
        );
        let attention = 4 * h * h;
        let ffn = h * f + f + f * h + h;
        let block = if self.moe {
            attention + experts as u64 * ffn + h * experts as u64
        } else {
            attention + ffn
        };
        v * h + self.layers as u64 * block + h * v + v
    }

    /// Activation high-water mark per sample, in elements, for the dense model:
    /// every tensor saved for backward plus logits and their gradient.
    pub fn activation_elements_per_sample(&self) -> u64 {
        let (s, h, f, v) = (
            self.sequence_length as u64,
            self.hidden_size as u64,
            self.embedding_size as u64,
            self.vocab_size as u64,
        );
        let heads = self.attention_heads as u64;
        let attention = 4 * s * h + heads * s * s;
        let block = attention + s * h + 2 * s * f + s * h;
        s * h + self.layers as u64 * block + 2 * s * v
    }

    /// Activation crossing one pipeline-stage boundary per sample, in elements.
    pub fn boundary_elements_per_sample(&self) -> u64 {
        (self.sequence_length * self.hidden_size) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_presets_are_verbatim() {
        let p = preset("gpt2-117m").unwrap();
        assert!(p.analytic_only);
        assert_eq!(p.config, shape(16, 768, 12, 512, 50257, 3072));
        assert_eq!(
            preset("gpt2-neo-2.7b").unwrap().config.embedding_size,
            10240
        );
        assert_eq!(presets().len(), 8);
    }

    #[test]
    fn toy_validates_for_powers_of_two() {
        for n in [1, 2, 4, 8, 16, 32] {
            ModelConfig::toy().validate(n).unwrap();
        }
        let err = ModelConfig::toy().validate(3).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("hidden_size 32")));
        let odd = ModelConfig {
            hidden_size: 30,
            ..ModelConfig::toy()
        };
        assert!(odd.validate(1).is_err());
    }

    #[test]
    fn gpt2_parameter_count_is_in_range() {
        // Untied head, no norms or position table: a little above the nominal 117M.
        let c = preset("gpt2-117m").unwrap().config;
        let p = c.param_count(1);
        assert!(p > 120_000_000 && p < 170_000_000, "{p}");
    }
}
