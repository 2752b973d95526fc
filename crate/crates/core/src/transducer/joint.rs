use rand::Rng;

use crate::layers::Linear;
use crate::numerics::{kernels, Bound, Graph, ParamSet, Tensor, Var};
use crate::{Error, Result};

/// `h_joint = FC(tanh(A h_enc + B h_dec))`; the output width is the
/// vocabulary size.
#[derive(Debug, Clone)]
pub struct Joint {
    pub enc: Linear,
    pub dec: Linear,
    pub out: Linear,
}

impl Joint {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet,
        prefix: &str,
        enc_dim: usize,
        dec_dim: usize,
        hidden: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            enc: Linear::init(set, &format!("{prefix}.enc"), hidden, enc_dim, true, rng)?,
            dec: Linear::init(set, &format!("{prefix}.dec"), hidden, dec_dim, false, rng)?,
            out: Linear::init(set, &format!("{prefix}.out"), vocab, hidden, true, rng)?,
        })
    }

    pub fn resolve(
        set: &ParamSet,
        prefix: &str,
        enc_dim: usize,
        dec_dim: usize,
        hidden: usize,
        vocab: usize,
    ) -> Result<Self> {
        Ok(Self {
            enc: Linear::resolve(set, &format!("{prefix}.enc"), hidden, enc_dim, true)?,
            dec: Linear::resolve(set, &format!("{prefix}.dec"), hidden, dec_dim, false)?,
            out: Linear::resolve(set, &format!("{prefix}.out"), vocab, hidden, true)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.out.d_out
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, h_enc: Var, h_dec: Var) -> Result<JointLattice> {
        if g.value(h_enc).cols() != self.enc.d_in || g.value(h_dec).cols() != self.dec.d_in {
            return Err(Error::dims("joint", g.shape(h_enc), g.shape(h_dec)));
        }
        let frames = g.value(h_enc).rows();
        let labels = g.value(h_dec).rows() - 1;
        let a = self.enc.forward(g, p, h_enc)?;
        let b = self.dec.forward(g, p, h_dec)?;
        let s = g.outer_add(a, b)?;
        let s = g.tanh(s);
        let h_joint = self.out.forward(g, p, s)?;
        let log_probs = g.log_softmax(h_joint)?;
        Ok(JointLattice {
            frames,
            labels,
            h_enc,
            h_dec,
            h_joint,
            log_probs,
        })
    }

    /// One lattice cell from precomputed projections `A h_enc` and `B h_dec`.
    pub fn cell(&self, set: &ParamSet, enc_proj: &[f64], dec_proj: &[f64]) -> JointCell {
        let s: Vec<f64> = enc_proj.iter().zip(dec_proj).map(|(a, b)| (a + b).tanh()).collect();
        let h_joint = self.out.apply_row(set, &s);
        let mut log_probs = vec![0.0; h_joint.len()];
        kernels::log_softmax_row(&h_joint, &mut log_probs);
        JointCell { h_joint, log_probs }
    }

    pub fn macs_per_cell(&self) -> usize {
        self.out.macs()
    }
}

/// Un-normalised and normalised joint output at one `(t, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCell {
    pub h_joint: Vec<f64>,
    pub log_probs: Vec<f64>,
}

/// The `T x (U+1) x V` grid of joint outputs, stored on a graph.
///
/// Row `t * (U+1) + u` of `h_joint` / `log_probs` belongs to cell `(t, u)`.
#[derive(Debug, Clone, Copy)]
pub struct JointLattice {
    pub frames: usize,
    pub labels: usize,
    pub h_enc: Var,
    pub h_dec: Var,
    pub h_joint: Var,
    pub log_probs: Var,
}

impl JointLattice {
    pub fn row(&self, t: usize, u: usize) -> usize {
        t * (self.labels + 1) + u
    }

    pub fn log_prob_table<'g>(&self, g: &'g Graph) -> &'g Tensor {
        g.value(self.log_probs)
    }
}
