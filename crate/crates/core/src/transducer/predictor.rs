use rand::Rng;

use crate::layers::{lookup, Linear};
use crate::numerics::{kernels, Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::{Error, Result};

use super::BLANK;

/// Label-history network: token embedding followed by one LSTM cell.
///
/// The input sequence is `[blank, y_1, .., y_U]`, blank standing in for the
/// start symbol, so row `u` of the output has seen exactly `y_1..y_u`.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub vocab: usize,
    pub dim: usize,
    pub emb: ParamId,
    /// Input-to-gates map, gate order i, f, g, o.
    pub wx: Linear,
    pub wh: Linear,
}

impl Predictor {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet,
        prefix: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let emb = set.insert(format!("{prefix}.emb"), Tensor::randn(&[vocab, dim], 1.0, rng))?;
        let wx = Linear::init(set, &format!("{prefix}.wx"), 4 * dim, dim, true, rng)?;
        let wh = Linear::init(set, &format!("{prefix}.wh"), 4 * dim, dim, false, rng)?;
        let bias = set.get_mut(wx.b.expect("bias"));
        bias.data_mut()[dim..2 * dim].fill(1.0);
        Ok(Self {
            vocab,
            dim,
            emb,
            wx,
            wh,
        })
    }

    pub fn resolve(set: &ParamSet, prefix: &str, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            vocab,
            dim,
            emb: lookup(set, &format!("{prefix}.emb"), &[vocab, dim])?,
            wx: Linear::resolve(set, &format!("{prefix}.wx"), 4 * dim, dim, true)?,
            wh: Linear::resolve(set, &format!("{prefix}.wh"), 4 * dim, dim, false)?,
        })
    }

    fn check(&self, tokens: &[usize]) -> Result<()> {
        for &y in tokens {
            if y == BLANK {
                return Err(Error::contract("blank is not a valid label"));
            }
            if y >= self.vocab {
                return Err(Error::Index {
                    what: "label",
                    index: y,
                    len: self.vocab,
                });
            }
        }
        Ok(())
    }

    /// `h_dec: [U+1, dim]` for labels `y_1..y_U`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: &[usize]) -> Result<Var> {
        self.check(tokens)?;
        let d = self.dim;
        let mut inputs = Vec::with_capacity(tokens.len() + 1);
        inputs.push(BLANK);
        inputs.extend_from_slice(tokens);
        let e = g.gather_rows(p.var(self.emb), &inputs)?;
        let xs = self.wx.forward(g, p, e)?;
        let mut h = g.constant(Tensor::zeros(&[1, d]));
        let mut c = g.constant(Tensor::zeros(&[1, d]));
        let mut outs = Vec::with_capacity(inputs.len());
        for u in 0..inputs.len() {
            let xu = g.gather_rows(xs, &[u])?;
            let hu = self.wh.forward(g, p, h)?;
            let gates = g.add(xu, hu)?;
            let i = g.slice_cols(gates, 0, d)?;
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, d, d)?;
            let f = g.sigmoid(f);
            let gg = g.slice_cols(gates, 2 * d, d)?;
            let gg = g.tanh(gg);
            let o = g.slice_cols(gates, 3 * d, d)?;
            let o = g.sigmoid(o);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, gg)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
            outs.push(h);
        }
        g.concat_rows(&outs)
    }

    pub fn macs_per_step(&self) -> usize {
        self.wx.macs() + self.wh.macs()
    }
}

/// Recurrent state after some label history.
#[derive(Debug, Clone, PartialEq)]
pub struct PredState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl PredState {
    /// State after the start symbol.
    pub fn start(pred: &Predictor, set: &ParamSet) -> Self {
        let zero = Self {
            h: vec![0.0; pred.dim],
            c: vec![0.0; pred.dim],
        };
        zero.advance(pred, set, BLANK)
    }

    /// Feed one more label.
    pub fn advance(&self, pred: &Predictor, set: &ParamSet, token: usize) -> Self {
        let d = pred.dim;
        let emb = set.get(pred.emb);
        let xu = pred.wx.apply_row(set, emb.row(token));
        let hu = pred.wh.apply_row(set, &self.h);
        let gates: Vec<f64> = xu.iter().zip(&hu).map(|(a, b)| a + b).collect();
        let mut h = vec![0.0; d];
        let mut c = vec![0.0; d];
        for j in 0..d {
            let i = kernels::sigmoid(gates[j]);
            let f = kernels::sigmoid(gates[d + j]);
            let gg = gates[2 * d + j].tanh();
            let o = kernels::sigmoid(gates[3 * d + j]);
            c[j] = f * self.c[j] + i * gg;
            h[j] = o * c[j].tanh();
        }
        Self { h, c }
    }
}
