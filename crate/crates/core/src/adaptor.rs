//! Frame-level bridge between the recogniser and the code decoder.
//!
//! Each frame gets an explicit vector (a joint-network row picked by the
//! greedy alignment) and an implicit one (a projection of the encoder
//! state, optionally gated), mixed by a trainable weight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{lookup, Linear};
use crate::numerics::{kernels, Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::transducer::{AlignmentPath, JointLattice};
use crate::{Error, Result};

pub const PREFIX: &str = "apt";

/// Which branches feed the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorPreset {
    /// Explicit branch only.
    Explicit,
    /// Ungated implicit branch only.
    Implicit,
    /// Weighted mix of explicit and ungated implicit.
    Fused,
    /// Weighted mix of explicit and gated implicit.
    #[default]
    FusedGated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptorConfig {
    /// Width of every adaptor vector.
    pub dim: usize,
    pub preset: AdaptorPreset,
    /// Starting weight of the explicit branch, in `(0, 1)`.
    pub lambda_init: f64,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            preset: AdaptorPreset::FusedGated,
            lambda_init: 0.5,
        }
    }
}

impl AdaptorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("adaptor dim must be positive".into()));
        }
        if !(self.lambda_init > 0.0 && self.lambda_init < 1.0) {
            return Err(Error::Config("lambda_init must lie strictly between 0 and 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adaptor {
    pub preset: AdaptorPreset,
    pub dim: usize,
    pub w_exp: Linear,
    pub imp: Linear,
    pub gate: Linear,
    pub value: Linear,
    pub lambda_logit: ParamId,
}

/// One released adaptor frame with its constituents.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorFrame {
    pub t: usize,
    pub h_exp: Vec<f64>,
    pub h_imp_gated: Vec<f64>,
    pub h_apt: Vec<f64>,
}

impl Adaptor {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet,
        cfg: &AdaptorConfig,
        joint_dim: usize,
        enc_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        Ok(Self {
            preset: cfg.preset,
            dim: d,
            w_exp: Linear::init(set, &format!("{PREFIX}.exp"), d, joint_dim, false, rng)?,
            imp: Linear::init(set, &format!("{PREFIX}.imp"), d, enc_dim, true, rng)?,
            gate: Linear::init(set, &format!("{PREFIX}.gate"), d, d, true, rng)?,
            value: Linear::init(set, &format!("{PREFIX}.value"), d, d, true, rng)?,
            lambda_logit: set.insert(format!("{PREFIX}.lambda"), Tensor::vector(vec![kernels::logit(cfg.lambda_init)]))?,
        })
    }

    pub fn resolve(set: &ParamSet, cfg: &AdaptorConfig, joint_dim: usize, enc_dim: usize) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            preset: cfg.preset,
            dim: d,
            w_exp: Linear::resolve(set, &format!("{PREFIX}.exp"), d, joint_dim, false)?,
            imp: Linear::resolve(set, &format!("{PREFIX}.imp"), d, enc_dim, true)?,
            gate: Linear::resolve(set, &format!("{PREFIX}.gate"), d, d, true)?,
            value: Linear::resolve(set, &format!("{PREFIX}.value"), d, d, true)?,
            lambda_logit: lookup(set, &format!("{PREFIX}.lambda"), &[1])?,
        })
    }

    pub fn lambda(&self, set: &ParamSet) -> f64 {
        kernels::sigmoid(set.get(self.lambda_logit).item())
    }

    /// Lattice rows the explicit branch reads: frame `t` takes
    /// `(min(t+1, T-1), u)` after a blank and `(min(t+1, T-1), u+1)` after
    /// an emission.
    pub fn align_rows(path: &AlignmentPath, frames: usize, labels: usize) -> Result<Vec<usize>> {
        path.validate(frames, labels)?;
        Ok(path
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| (t + 1).min(frames - 1) * (labels + 1) + s.u_after())
            .collect())
    }

    /// Explicit branch `h_exp: [T, dim]` from the pre-softmax joint output.
    pub fn frame_align(&self, g: &mut Graph, p: &Bound, lat: &JointLattice, path: &AlignmentPath) -> Result<Var> {
        let rows = Self::align_rows(path, lat.frames, lat.labels)?;
        let picked = g.gather_rows(lat.h_joint, &rows)?;
        self.w_exp.forward(g, p, picked)
    }

    /// `W_imp h_enc + b_imp`.
    pub fn project_implicit(&self, g: &mut Graph, p: &Bound, h_enc: Var) -> Result<Var> {
        self.imp.forward(g, p, h_enc)
    }

    /// `sigmoid(W_g h + b_g) * (W_v h + b_v)`.
    pub fn switch_glu(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        let gate = self.gate.forward(g, p, h)?;
        let gate = g.sigmoid(gate);
        let value = self.value.forward(g, p, h)?;
        g.mul(gate, value)
    }

    /// `lambda * h_exp + (1 - lambda) * h_other` with `lambda = sigmoid(logit)`.
    pub fn fuse(&self, g: &mut Graph, p: &Bound, h_exp: Var, h_other: Var) -> Result<Var> {
        let lam = g.sigmoid(p.var(self.lambda_logit));
        g.lerp(h_exp, h_other, lam)
    }

    /// Full adaptor output for the configured preset.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        lat: &JointLattice,
        path: &AlignmentPath,
    ) -> Result<Var> {
        if g.value(lat.h_enc).rows() != path.len() {
            return Err(Error::contract("alignment and encoder lengths differ"));
        }
        match self.preset {
            AdaptorPreset::Explicit => self.frame_align(g, p, lat, path),
            AdaptorPreset::Implicit => self.project_implicit(g, p, lat.h_enc),
            AdaptorPreset::Fused => {
                let e = self.frame_align(g, p, lat, path)?;
                let i = self.project_implicit(g, p, lat.h_enc)?;
                self.fuse(g, p, e, i)
            }
            AdaptorPreset::FusedGated => {
                let e = self.frame_align(g, p, lat, path)?;
                let i = self.project_implicit(g, p, lat.h_enc)?;
                let i = self.switch_glu(g, p, i)?;
                self.fuse(g, p, e, i)
            }
        }
    }

    /// One frame from its selected joint row and its encoder row. Matches
    /// the graph form to the bit.
    pub fn frame_row(&self, set: &ParamSet, t: usize, h_joint: &[f64], h_enc: &[f64]) -> AdaptorFrame {
        let h_exp = self.w_exp.apply_row(set, h_joint);
        let imp = self.imp.apply_row(set, h_enc);
        let h_imp_gated = match self.preset {
            AdaptorPreset::FusedGated => {
                let gate = self.gate.apply_row(set, &imp);
                let value = self.value.apply_row(set, &imp);
                gate.iter().zip(&value).map(|(g, v)| kernels::sigmoid(*g) * v).collect()
            }
            _ => imp,
        };
        let h_apt = match self.preset {
            AdaptorPreset::Explicit => h_exp.clone(),
            AdaptorPreset::Implicit => h_imp_gated.clone(),
            AdaptorPreset::Fused | AdaptorPreset::FusedGated => {
                let l = self.lambda(set);
                h_exp
                    .iter()
                    .zip(&h_imp_gated)
                    .map(|(x, y)| l * x + (1.0 - l) * y)
                    .collect()
            }
        };
        AdaptorFrame {
            t,
            h_exp,
            h_imp_gated,
            h_apt,
        }
    }

    pub fn macs_per_frame(&self) -> usize {
        let gated = if self.preset == AdaptorPreset::FusedGated {
            self.gate.macs() + self.value.macs()
        } else {
            0
        };
        self.w_exp.macs() + self.imp.macs() + gated
    }
}

/// Holds each frame back until the next frame's joint row exists.
#[derive(Debug, Clone, Default)]
pub struct AdaptorStream {
    pending: Option<(usize, Vec<f64>)>,
    next_t: usize,
}

impl AdaptorStream {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feed frame `t`: its encoder row and the joint row read at its start.
    /// Releases frame `t - 1`, whose explicit vector is exactly that row.
    pub fn push(&mut self, adaptor: &Adaptor, set: &ParamSet, h_enc: Vec<f64>, h_joint: &[f64]) -> Option<AdaptorFrame> {
        let released = self
            .pending
            .take()
            .map(|(t, prev_enc)| adaptor.frame_row(set, t, h_joint, &prev_enc));
        self.pending = Some((self.next_t, h_enc));
        self.next_t += 1;
        released
    }

    /// Release the last frame using the final joint cell.
    pub fn finish(&mut self, adaptor: &Adaptor, set: &ParamSet, final_joint: &[f64]) -> Option<AdaptorFrame> {
        self.pending
            .take()
            .map(|(t, enc)| adaptor.frame_row(set, t, final_joint, &enc))
    }

    /// Frames held back (at most one).
    pub fn buffered(&self) -> usize {
        usize::from(self.pending.is_some())
    }
}
