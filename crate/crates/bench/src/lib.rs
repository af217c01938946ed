//! Shared fixtures for the criterion benchmarks.

use attnloc_core::{ModelConfig, TokenId};

/// A deterministic token window of the given length.
pub fn window(len: usize) -> Vec<TokenId> {
    (0..len).map(|i| ((i * 37 + 11) % 251) as TokenId).collect()
}

/// A small configuration for per-step timings.
pub fn bench_config() -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        num_heads: 4,
        model_dim: 64,
        mlp_dim: 256,
        vocab_size: 256,
        context_length: 64,
        init_seed: 42,
    }
}
