#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiermoe_core::model::ModelConfig;
use tiermoe_core::train::Batch;

/// 2 layers, d=16, n=8, K=2, C=3.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 16,
        num_layers: 2,
        heads: 2,
        expert_hidden: 8,
        num_experts: 8,
        top_k: 2,
        max_seq_len: 8,
        ..Default::default()
    }
}

/// Copy sequences `p SEP p` over symbols `0..vocab-1`, with `vocab-1` as
/// the separator.
pub fn copy_batch(vocab: usize, prompt: usize, batch: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sep = vocab - 1;
    let seqs: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let p: Vec<usize> = (0..prompt).map(|_| rng.gen_range(0..sep)).collect();
            let mut s = p.clone();
            s.push(sep);
            s.extend(p);
            s
        })
        .collect();
    Batch::from_sequences(&seqs, &vec![prompt + 1; batch]).unwrap()
}
