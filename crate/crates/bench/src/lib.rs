//! Shared fixtures for the criterion benches.

use surelock::model::LayerKVCache;
use surelock::{full_forward, init_weights_with_std, random_prompt, ModelConfig, Weights};

/// Toy weights at a scale where locking actually happens.
pub fn toy_weights() -> Weights {
    init_weights_with_std(&ModelConfig::toy(), 0, 0.3).expect("toy config is valid")
}

pub fn toy_tokens(w: &Weights) -> Vec<usize> {
    random_prompt(w.config.vocab_size, w.config.max_seq, 1)
}

/// Caches filled from a full pass, with every row cached.
pub fn full_caches(w: &Weights, tokens: &[usize]) -> Vec<LayerKVCache> {
    let full = full_forward(w, tokens).expect("valid tokens");
    (0..w.config.n_layers)
        .map(|l| {
            let mut c = LayerKVCache::new(tokens.len(), w.config.kv_dim());
            for i in 0..tokens.len() {
                c.store(i, full.keys[l].row(i), full.values[l].row(i));
            }
            c
        })
        .collect()
}
