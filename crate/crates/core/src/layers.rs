//! Parameterised building blocks shared by the encoder and the wait-k
//! decoder.
//!
//! Every block has a graph form (for training) and a row form (for
//! streaming inference). Both go through [`kernels`], so they agree to the
//! bit when fed the same rows.

use rand::Rng;

use crate::numerics::{kernels, Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::Result;

fn glorot<R: Rng + ?Sized>(d_out: usize, d_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        d_out: usize,
        d_in: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = set.insert(format!("{name}.w"), glorot(d_out, d_in, rng))?;
        let b = if bias {
            Some(set.insert(format!("{name}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    /// Look up an existing layer by name, checking shapes.
    pub fn resolve(set: &ParamSet, name: &str, d_out: usize, d_in: usize, bias: bool) -> Result<Self> {
        let w = lookup(set, &format!("{name}.w"), &[d_out, d_in])?;
        let b = if bias {
            Some(lookup(set, &format!("{name}.b"), &[d_out])?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }

    pub fn apply_row(&self, set: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_out];
        kernels::affine_row(
            x,
            set.get(self.w).data(),
            self.b.map(|b| set.get(b).data()),
            &mut out,
        );
        out
    }

    pub fn macs(&self) -> usize {
        self.d_in * self.d_out
    }
}

/// Resolve a tensor by name and check its shape.
pub fn lookup(set: &ParamSet, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = set
        .id(name)
        .ok_or_else(|| crate::Error::contract(format!("checkpoint is missing {name}")))?;
    if set.get(id).shape() != shape {
        return Err(crate::Error::contract(format!(
            "{name} has shape {:?}, expected {shape:?}",
            set.get(id).shape()
        )));
    }
    Ok(id)
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(set: &mut ParamSet, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: set.insert(format!("{name}.g"), Tensor::full(&[d], 1.0))?,
            beta: set.insert(format!("{name}.b"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn resolve(set: &ParamSet, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: lookup(set, &format!("{name}.g"), &[d])?,
            beta: lookup(set, &format!("{name}.b"), &[d])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }

    pub fn apply_row(&self, set: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        kernels::layer_norm_row(x, set.get(self.gamma).data(), set.get(self.beta).data(), &mut out);
        out
    }
}

/// Pre-norm transformer block: `x + O(attn(LN x))`, then `x + FFN(LN x)`.
///
/// Attention itself is left to the caller since the encoder and the wait-k
/// decoder mask it differently. Keys carry no bias: a shared offset on every
/// key moves all scores of a query equally and cancels in the softmax.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

/// Query, key and value rows of one block input.
pub struct Qkv<T> {
    pub q: T,
    pub k: T,
    pub v: T,
}

impl Block {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        dim: usize,
        ffn: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::init(set, &format!("{name}.ln1"), dim)?,
            q: Linear::init(set, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::init(set, &format!("{name}.k"), dim, dim, false, rng)?,
            v: Linear::init(set, &format!("{name}.v"), dim, dim, true, rng)?,
            o: Linear::init(set, &format!("{name}.o"), dim, dim, true, rng)?,
            ln2: LayerNorm::init(set, &format!("{name}.ln2"), dim)?,
            ff1: Linear::init(set, &format!("{name}.ff1"), ffn, dim, true, rng)?,
            ff2: Linear::init(set, &format!("{name}.ff2"), dim, ffn, true, rng)?,
            heads,
        })
    }

    pub fn resolve(set: &ParamSet, name: &str, dim: usize, ffn: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::resolve(set, &format!("{name}.ln1"), dim)?,
            q: Linear::resolve(set, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::resolve(set, &format!("{name}.k"), dim, dim, false)?,
            v: Linear::resolve(set, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::resolve(set, &format!("{name}.o"), dim, dim, true)?,
            ln2: LayerNorm::resolve(set, &format!("{name}.ln2"), dim)?,
            ff1: Linear::resolve(set, &format!("{name}.ff1"), ffn, dim, true)?,
            ff2: Linear::resolve(set, &format!("{name}.ff2"), dim, ffn, true)?,
            heads,
        })
    }

    pub fn qkv(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Qkv<Var>> {
        let a = self.ln1.forward(g, p, x)?;
        Ok(Qkv {
            q: self.q.forward(g, p, a)?,
            k: self.k.forward(g, p, a)?,
            v: self.v.forward(g, p, a)?,
        })
    }

    /// Output projection, residual, and the feed-forward sub-block.
    pub fn finish(&self, g: &mut Graph, p: &Bound, x: Var, att: Var) -> Result<Var> {
        let o = self.o.forward(g, p, att)?;
        let h = g.add(x, o)?;
        let f = self.ln2.forward(g, p, h)?;
        let f = self.ff1.forward(g, p, f)?;
        let f = g.silu(f);
        let f = self.ff2.forward(g, p, f)?;
        g.add(h, f)
    }

    pub fn qkv_row(&self, set: &ParamSet, x: &[f64]) -> Qkv<Vec<f64>> {
        let a = self.ln1.apply_row(set, x);
        Qkv {
            q: self.q.apply_row(set, &a),
            k: self.k.apply_row(set, &a),
            v: self.v.apply_row(set, &a),
        }
    }

    pub fn finish_row(&self, set: &ParamSet, x: &[f64], att: &[f64]) -> Vec<f64> {
        let o = self.o.apply_row(set, att);
        let h: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let f = self.ln2.apply_row(set, &h);
        let mut f = self.ff1.apply_row(set, &f);
        for v in f.iter_mut() {
            *v = kernels::silu(*v);
        }
        let f = self.ff2.apply_row(set, &f);
        h.iter().zip(&f).map(|(a, b)| a + b).collect()
    }

    /// Multiply-accumulates of the dense projections for one row.
    pub fn dense_macs(&self) -> usize {
        self.q.macs() + self.k.macs() + self.v.macs() + self.o.macs() + self.ff1.macs() + self.ff2.macs()
    }
}

/// Multi-head attention of one query row over `keys`/`values` (row slices in
/// summation order) with per-key bias for each head. Matches the graph's
/// attention op to the bit.
pub fn attend_row(
    q: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
    heads: usize,
    bias: impl Fn(usize, usize) -> f64,
) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut weights = vec![0.0; keys.len()];
    let mut hk: Vec<&[f64]> = Vec::with_capacity(keys.len());
    let mut hv: Vec<&[f64]> = Vec::with_capacity(keys.len());
    let mut hb = Vec::with_capacity(keys.len());
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        hk.clear();
        hv.clear();
        hb.clear();
        for (i, (k, v)) in keys.iter().zip(values).enumerate() {
            hk.push(&k[cols.clone()]);
            hv.push(&v[cols.clone()]);
            hb.push(bias(h, i));
        }
        kernels::attend_head(&q[cols.clone()], &hk, &hv, &hb, scale, &mut weights, &mut out[cols]);
    }
    out
}
