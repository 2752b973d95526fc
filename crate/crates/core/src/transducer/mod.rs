//! Streaming transducer recogniser: causal windowed encoder, LSTM label
//! predictor, joint network, the forward-backward transducer loss and greedy
//! frame-synchronous decoding.

mod decode;
mod encoder;
mod joint;
mod predictor;

pub use decode::{
    greedy_decode, greedy_path, AlignmentPath, Decision, FrameOutput, Hypothesis, PathStep,
    TransducerStream,
};
pub use encoder::{Encoder, EncoderConfig, EncoderStream};
pub use joint::{Joint, JointCell, JointLattice};
pub use predictor::{PredState, Predictor};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Bound, Graph, ParamSet, Tensor, Var};
use crate::Result;

/// Label id reserved for "no emission".
pub const BLANK: usize = 0;

/// Prefix of every transducer parameter name.
pub const PREFIX: &str = "tr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransducerConfig {
    pub encoder: EncoderConfig,
    pub pred_dim: usize,
    pub joint_dim: usize,
}

impl Default for TransducerConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pred_dim: 32,
            joint_dim: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Transducer {
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub joint: Joint,
}

impl Transducer {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet,
        cfg: &TransducerConfig,
        input_dim: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.encoder.model_dim;
        Ok(Self {
            encoder: Encoder::init(set, &format!("{PREFIX}.enc"), &cfg.encoder, input_dim, rng)?,
            predictor: Predictor::init(set, &format!("{PREFIX}.pred"), vocab, cfg.pred_dim, rng)?,
            joint: Joint::init(set, &format!("{PREFIX}.joint"), d, cfg.pred_dim, cfg.joint_dim, vocab, rng)?,
        })
    }

    pub fn resolve(set: &ParamSet, cfg: &TransducerConfig, input_dim: usize, vocab: usize) -> Result<Self> {
        let d = cfg.encoder.model_dim;
        Ok(Self {
            encoder: Encoder::resolve(set, &format!("{PREFIX}.enc"), &cfg.encoder, input_dim)?,
            predictor: Predictor::resolve(set, &format!("{PREFIX}.pred"), vocab, cfg.pred_dim)?,
            joint: Joint::resolve(set, &format!("{PREFIX}.joint"), d, cfg.pred_dim, cfg.joint_dim, vocab)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.joint.vocab()
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.encoder.forward(g, p, x)
    }

    pub fn predict(&self, g: &mut Graph, p: &Bound, labels: &[usize]) -> Result<Var> {
        self.predictor.forward(g, p, labels)
    }

    /// Joint lattice of `labels` over already encoded frames.
    pub fn lattice(&self, g: &mut Graph, p: &Bound, h_enc: Var, labels: &[usize]) -> Result<JointLattice> {
        let h_dec = self.predict(g, p, labels)?;
        self.joint.forward(g, p, h_enc, h_dec)
    }

    /// Negative log-likelihood of `labels` summed over all alignments.
    pub fn loss(&self, g: &mut Graph, lat: &JointLattice, labels: &[usize]) -> Result<Var> {
        g.transducer_loss(lat.log_probs, lat.frames, labels)
    }

    /// Encoder output for a whole utterance without recording gradients.
    pub fn encode_offline(&self, set: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = set.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let h = self.encode(&mut g, &p, xv)?;
        Ok(g.value(h).clone())
    }

    /// Greedy transcription of a whole utterance.
    pub fn transcribe(&self, set: &ParamSet, x: &Tensor) -> Result<Hypothesis> {
        let h = self.encode_offline(set, x)?;
        Ok(greedy_decode(self, set, &h))
    }

    /// Multiply-accumulates for one streamed frame: encoder, one joint cell
    /// and one predictor step.
    pub fn macs_per_frame(&self) -> usize {
        self.encoder.macs_per_frame()
            + self.joint.enc.macs()
            + self.joint.dec.macs()
            + self.joint.macs_per_cell()
            + self.predictor.macs_per_step()
    }
}
