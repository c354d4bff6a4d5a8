use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
    /// Layers whose hidden states are evaluated; 0 is the embedding output.
    pub eval_layers: Vec<usize>,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers of width 128 with four heads.
    pub fn new(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: 4,
            hidden: 128,
            heads: 4,
            ff_dim: 512,
            max_seq: 128,
            vocab_size,
            tie_embeddings: true,
            eval_layers: vec![0, 2, 4],
            init_std: 0.002,
        }
    }

    /// Small configuration used for fast experiments and tests.
    pub fn tiny(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 32,
            heads: 2,
            ff_dim: 64,
            max_seq: 32,
            vocab_size,
            tie_embeddings: true,
            eval_layers: vec![0, 1, 2],
            init_std: 0.002,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// `{0, L/2, L}` without duplicates.
    pub fn default_eval_layers(layers: usize) -> Vec<usize> {
        let mut v = vec![0, layers / 2, layers];
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ff_dim == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_seq < 3 {
            return bad("max_seq must fit CLS, one token and SEP".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if let Some(&l) = self.eval_layers.iter().find(|&&l| l > self.layers) {
            return bad(format!("eval layer {l} exceeds layer count {}", self.layers));
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }
}
