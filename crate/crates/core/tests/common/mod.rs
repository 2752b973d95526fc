//! Oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdsr::adaptor::{AdaptorConfig, AdaptorPreset};
use sdsr::model::{ModelBundle, ModelConfig};
use sdsr::numerics::Tensor;
use sdsr::quantizer::{fit_codebook, QuantizerConfig};
use sdsr::transducer::{EncoderConfig, TransducerConfig};
use sdsr::waitk::WaitKConfig;

pub const FEATURES: usize = 5;
pub const VOCAB: usize = 6;
pub const DUR: f64 = 0.04;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Every monotone path through a `frames x (labels + 1)` lattice, as the
/// list of `(t, u, symbol)` moves it makes. Blank is symbol 0 and the path
/// ends with a blank out of the top-right cell.
pub fn lattice_paths(frames: usize, targets: &[usize]) -> Vec<Vec<(usize, usize, usize)>> {
    fn walk(
        t: usize,
        u: usize,
        frames: usize,
        targets: &[usize],
        path: &mut Vec<(usize, usize, usize)>,
        out: &mut Vec<Vec<(usize, usize, usize)>>,
    ) {
        if u < targets.len() {
            path.push((t, u, targets[u]));
            walk(t, u + 1, frames, targets, path, out);
            path.pop();
        }
        path.push((t, u, 0));
        if t + 1 < frames {
            walk(t + 1, u, frames, targets, path, out);
        } else if u == targets.len() {
            out.push(path.clone());
        }
        path.pop();
    }
    let mut out = Vec::new();
    walk(0, 0, frames, targets, &mut Vec::new(), &mut out);
    out
}

/// Negative log-likelihood by explicit enumeration of alignment paths.
/// `lp` holds one log-distribution row per lattice cell, row `t * (U+1) + u`.
pub fn brute_force_nll(lp: &Tensor, frames: usize, targets: &[usize]) -> f64 {
    let u1 = targets.len() + 1;
    let scores: Vec<f64> = lattice_paths(frames, targets)
        .iter()
        .map(|p| p.iter().map(|&(t, u, k)| lp.row(t * u1 + u)[k]).sum())
        .collect();
    -log_sum_exp(&scores)
}

/// Random lattice of normalised log-distributions over `vocab` symbols.
pub fn random_lattice(r: &mut ChaCha8Rng, frames: usize, labels: usize, vocab: usize) -> Tensor {
    let rows = frames * (labels + 1);
    let mut data = Vec::with_capacity(rows * vocab);
    for _ in 0..rows {
        let logits: Vec<f64> = (0..vocab).map(|_| r.random_range(-3.0..3.0)).collect();
        let z = log_sum_exp(&logits);
        data.extend(logits.iter().map(|l| l - z));
    }
    Tensor::matrix(rows, vocab, data).unwrap()
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        transducer: TransducerConfig {
            encoder: EncoderConfig {
                num_layers: 2,
                model_dim: 8,
                num_heads: 2,
                ffn_dim: 16,
                left_context: 64,
                right_context: 0,
            },
            pred_dim: 8,
            joint_dim: 8,
        },
        adaptor: AdaptorConfig {
            dim: 8,
            preset: AdaptorPreset::FusedGated,
            lambda_init: 0.5,
        },
        waitk: WaitKConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            ..WaitKConfig::default()
        },
    }
}

/// Untrained toy system; the blank bias is lowered so random inputs yield
/// some labels.
pub fn toy_bundle(seed: u64) -> ModelBundle {
    let mut r = rng(seed);
    let points = Tensor::randn(&[40, 3], 1.0, &mut r);
    let qc = QuantizerConfig {
        codes: 4,
        ..QuantizerConfig::default()
    };
    let codebook = fit_codebook(&points, &qc, DUR, seed).unwrap();
    let mut b = ModelBundle::init(&toy_config(), FEATURES, VOCAB, codebook, seed).unwrap();
    let id = b.set.id("tr.joint.out.b").unwrap();
    b.set.get_mut(id).data_mut()[0] -= 1.0;
    b
}

pub fn input(seed: u64, frames: usize) -> Tensor {
    Tensor::randn(&[frames, FEATURES], 1.0, &mut rng(seed ^ 0xf00d))
}
