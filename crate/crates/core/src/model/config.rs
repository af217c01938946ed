use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    /// The desk-scale configuration.
    fn default() -> Self {
        Self {
            num_layers: 6,
            num_heads: 4,
            model_dim: 128,
            mlp_dim: 512,
            vocab_size: 256,
            context_length: 128,
            init_seed: 42,
        }
    }
}

impl ModelConfig {
    /// Tiny shape used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            mlp_dim: 64,
            vocab_size: 256,
            context_length: 12,
            init_seed: 42,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("mlp_dim", self.mlp_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.context_length < 2 {
            return Err(Error::InvalidConfig("context_length must be >= 2".into()));
        }
        Ok(())
    }

    /// Layer whose input residual stream is used as the token embedding for
    /// semantic partitioning.
    pub fn embedding_layer(&self) -> usize {
        self.num_layers / 2
    }
}
