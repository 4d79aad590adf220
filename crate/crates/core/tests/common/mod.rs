#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapegene::netzoo::{NetConfig, NormKind};
use shapegene_tensor::Tensor;

/// Smallest architecture that exercises every layer kind.
pub fn tiny(resolution: usize) -> NetConfig {
    NetConfig {
        resolution,
        gene_slot_dim: 4,
        width: 4,
        transformer_width: 4,
        disc_width: 4,
        encoder_res_blocks: 1,
        decoder_res_blocks: 1,
        transformer_res_blocks: 1,
        feature_widths: [2, 3, 4, 4, 4],
        identity_widths: [2, 3, 4, 4, 4],
        identity_embedding: 4,
        identity_classes: 4,
        norm: NormKind::Instance,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data, shape).unwrap()
}

/// Binary `[b, 1, h, w]` mask data.
pub fn random_mask(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect()
}
