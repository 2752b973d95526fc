use std::collections::VecDeque;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{attend_row, Block, LayerNorm, Linear};
use crate::numerics::{AttnMask, Bound, Graph, ParamSet, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Total look-back in frames across the whole stack.
    pub left_context: usize,
    pub right_context: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            left_context: 64,
            right_context: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "encoder model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Look-back of layer `l`. The total budget is split across layers so
    /// that the stacked receptive field never exceeds `left_context`.
    pub fn layer_window(&self, l: usize) -> usize {
        let base = self.left_context / self.num_layers;
        base + usize::from(l < self.left_context % self.num_layers)
    }
}

/// Causal windowed self-attention stack ("conformer-lite": no convolution
/// module).
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet,
        prefix: &str,
        cfg: &EncoderConfig,
        input_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let input = Linear::init(set, &format!("{prefix}.in"), d, input_dim, true, rng)?;
        let blocks = (0..cfg.num_layers)
            .map(|l| Block::init(set, &format!("{prefix}.l{l}"), d, cfg.ffn_dim, cfg.num_heads, rng))
            .collect::<Result<_>>()?;
        let final_ln = LayerNorm::init(set, &format!("{prefix}.ln"), d)?;
        Ok(Self {
            cfg: cfg.clone(),
            input,
            blocks,
            final_ln,
        })
    }

    pub fn resolve(set: &ParamSet, prefix: &str, cfg: &EncoderConfig, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Self {
            cfg: cfg.clone(),
            input: Linear::resolve(set, &format!("{prefix}.in"), d, input_dim, true)?,
            blocks: (0..cfg.num_layers)
                .map(|l| Block::resolve(set, &format!("{prefix}.l{l}"), d, cfg.ffn_dim, cfg.num_heads))
                .collect::<Result<_>>()?,
            final_ln: LayerNorm::resolve(set, &format!("{prefix}.ln"), d)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input.d_in
    }

    /// Visible keys of every query for layer `l` over `frames` frames.
    pub fn mask(&self, l: usize, frames: usize) -> AttnMask {
        let w = self.cfg.layer_window(l);
        let rows = (0..frames)
            .map(|t| {
                let lo = t.saturating_sub(w);
                let hi = (t + self.cfg.right_context).min(frames - 1);
                (lo..=hi).map(|s| (s, 0)).collect()
            })
            .collect();
        AttnMask { rows, n_bias: 1 }
    }

    /// `x: [T, input_dim]` to `h_enc: [T, model_dim]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let frames = g.value(x).rows();
        if frames == 0 {
            return Err(Error::contract("cannot encode an empty frame sequence"));
        }
        let mut h = self.input.forward(g, p, x)?;
        for (l, block) in self.blocks.iter().enumerate() {
            let qkv = block.qkv(g, p, h)?;
            let mask = Rc::new(self.mask(l, frames));
            let att = g.attention(qkv.q, qkv.k, qkv.v, block.heads, mask, None)?;
            h = block.finish(g, p, h, att)?;
        }
        self.final_ln.forward(g, p, h)
    }

    /// Multiply-accumulates for one streamed frame, attention taken over a
    /// full window.
    pub fn macs_per_frame(&self) -> usize {
        let d = self.cfg.model_dim;
        let mut total = self.input.macs();
        for (l, block) in self.blocks.iter().enumerate() {
            let keys = self.cfg.layer_window(l) + 1;
            total += block.dense_macs() + 2 * keys * d;
        }
        total
    }
}

/// Frame-by-frame encoder state: one bounded key/value cache per layer.
#[derive(Debug, Clone, Default)]
pub struct EncoderStream {
    caches: Vec<VecDeque<(Vec<f64>, Vec<f64>)>>,
    frames: usize,
}

impl EncoderStream {
    pub fn new(enc: &Encoder) -> Result<Self> {
        if enc.cfg.right_context != 0 {
            return Err(Error::Config("streaming requires right_context = 0".into()));
        }
        Ok(Self {
            caches: vec![VecDeque::new(); enc.blocks.len()],
            frames: 0,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Largest number of cached entries in any layer.
    pub fn cache_len(&self) -> usize {
        self.caches.iter().map(VecDeque::len).max().unwrap_or(0)
    }

    /// Encode one frame given everything pushed so far.
    pub fn step(&mut self, enc: &Encoder, set: &ParamSet, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != enc.input_dim() {
            return Err(Error::dims("encoder frame", &[frame.len()], &[enc.input_dim()]));
        }
        let mut h = enc.input.apply_row(set, frame);
        for (l, block) in enc.blocks.iter().enumerate() {
            let qkv = block.qkv_row(set, &h);
            let cache = &mut self.caches[l];
            cache.push_back((qkv.k, qkv.v));
            if cache.len() > enc.cfg.layer_window(l) + 1 {
                cache.pop_front();
            }
            let keys: Vec<&[f64]> = cache.iter().map(|(k, _)| k.as_slice()).collect();
            let vals: Vec<&[f64]> = cache.iter().map(|(_, v)| v.as_slice()).collect();
            let att = attend_row(&qkv.q, &keys, &vals, block.heads, |_, _| 0.0);
            h = block.finish_row(set, &h, &att);
        }
        self.frames += 1;
        Ok(enc.final_ln.apply_row(set, &h))
    }
}
