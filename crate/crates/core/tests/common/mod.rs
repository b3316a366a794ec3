#![allow(dead_code)]

use ecoprune_core::denoiser::{Denoiser, DenoiserConfig};
use ecoprune_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config(steps: usize) -> DenoiserConfig {
    DenoiserConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        n_blocks: 2,
        seq_len: 3,
        n_conditions: 4,
        steps,
    }
}

pub fn model(cfg: DenoiserConfig, seed: u64) -> Denoiser<f64> {
    Denoiser::init(cfg, &mut rng(seed)).unwrap()
}

pub fn uniform(n: usize, lo: f64, hi: f64, r: &mut impl Rng) -> Tensor<f64> {
    Tensor::vector((0..n).map(|_| r.random_range(lo..hi)).collect::<Vec<_>>())
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}
