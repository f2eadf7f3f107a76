#![allow(dead_code)]

use dlab_core::objectives::{TaskBatch, TaskExample};
use dlab_core::{ModelConfig, Tensor, TinyLmm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config() -> ModelConfig {
    ModelConfig { layers: 2, d_model: 8, heads: 2, head_dim: 4, hidden: 16, vocab: 12, visual_tokens: 2, visual_dim: 4 }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_visual(cfg: &ModelConfig, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(&[cfg.visual_tokens, cfg.visual_dim], 1.0, rng)
}

pub fn random_tokens(cfg: &ModelConfig, n: usize, rng: &mut impl Rng) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..cfg.vocab as u32)).collect()
}

pub fn random_example(cfg: &ModelConfig, rng: &mut impl Rng) -> TaskExample {
    let prompt_len = rng.random_range(1..=3);
    let answer_len = rng.random_range(1..=3);
    TaskExample {
        visual: random_visual(cfg, rng),
        prompt: random_tokens(cfg, prompt_len, rng),
        answer: random_tokens(cfg, answer_len, rng),
    }
}

pub fn random_batch(cfg: &ModelConfig, n: usize, rng: &mut impl Rng) -> TaskBatch {
    TaskBatch::new((0..n).map(|_| random_example(cfg, rng)).collect())
}

/// Model with perturbed norm gains so the gain gradients are non-trivial.
pub fn random_model(cfg: ModelConfig, seed: u64) -> TinyLmm {
    let mut model = TinyLmm::seeded(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xabcdef);
    let names: Vec<String> =
        model.params().names().filter(|n| n.ends_with("ln1") || n.ends_with("ln2")).map(String::from).collect();
    for n in names {
        for v in model.params_mut().get_mut(&n).unwrap().data_mut() {
            *v = 1.0 + r.random_range(-0.3..0.3);
        }
    }
    model
}
