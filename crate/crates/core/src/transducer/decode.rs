use serde::{Deserialize, Serialize};

use crate::numerics::{kernels, ParamSet, Tensor};
use crate::{Error, Result};

use super::encoder::EncoderStream;
use super::joint::JointCell;
use super::predictor::PredState;
use super::{Transducer, BLANK};

/// What the greedy decoder did at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Blank,
    Emit(usize),
}

/// One frame of an alignment: the decision and the label position `u` in
/// force when the frame was read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub decision: Decision,
    pub u: usize,
}

impl PathStep {
    /// Label position after this frame.
    pub fn u_after(&self) -> usize {
        match self.decision {
            Decision::Blank => self.u,
            Decision::Emit(_) => self.u + 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub steps: Vec<PathStep>,
}

impl AlignmentPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter_map(|s| match s.decision {
                Decision::Emit(y) => Some(y),
                Decision::Blank => None,
            })
            .collect()
    }

    /// Check the path against a `frames x (labels+1)` lattice: one step per
    /// frame, `u` starting at 0, advancing only on emissions, never past
    /// `labels`.
    pub fn validate(&self, frames: usize, labels: usize) -> Result<()> {
        if self.steps.len() != frames {
            return Err(Error::contract(format!(
                "path has {} steps for {frames} frames",
                self.steps.len()
            )));
        }
        let mut u = 0;
        for (t, s) in self.steps.iter().enumerate() {
            if s.u != u {
                return Err(Error::contract(format!("path position jumps at frame {t}")));
            }
            u = s.u_after();
            if u > labels {
                return Err(Error::contract(format!("path passes U={labels} at frame {t}")));
            }
        }
        Ok(())
    }
}

/// Greedy decision at one lattice row: argmax, except that no label can be
/// emitted once every label position is used.
fn decide(log_probs: &[f64], u: usize, max_u: Option<usize>) -> Decision {
    let best = kernels::argmax(log_probs);
    if best == BLANK || max_u.is_some_and(|m| u >= m) {
        Decision::Blank
    } else {
        Decision::Emit(best)
    }
}

/// Greedy path through a precomputed lattice (`log_probs` rows laid out as
/// `t * (labels+1) + u`), at most one emission per frame.
pub fn greedy_path(log_probs: &Tensor, frames: usize, labels: usize) -> Result<AlignmentPath> {
    if log_probs.rows() != frames * (labels + 1) {
        return Err(Error::dims("greedy_path", log_probs.shape(), &[frames, labels + 1]));
    }
    let mut u = 0;
    let mut steps = Vec::with_capacity(frames);
    for t in 0..frames {
        let decision = decide(log_probs.row(t * (labels + 1) + u), u, Some(labels));
        let step = PathStep { decision, u };
        u = step.u_after();
        steps.push(step);
    }
    Ok(AlignmentPath { steps })
}

/// Result of greedy decoding straight from the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub path: AlignmentPath,
}

/// Offline greedy decoding over encoder outputs `h_enc: [T, D]`.
pub fn greedy_decode(model: &Transducer, set: &ParamSet, h_enc: &Tensor) -> Hypothesis {
    let mut state = PredState::start(&model.predictor, set);
    let mut dec_proj = model.joint.dec.apply_row(set, &state.h);
    let mut steps = Vec::with_capacity(h_enc.rows());
    let mut tokens = Vec::new();
    for t in 0..h_enc.rows() {
        let enc_proj = model.joint.enc.apply_row(set, h_enc.row(t));
        let cell = model.joint.cell(set, &enc_proj, &dec_proj);
        let step = PathStep {
            decision: decide(&cell.log_probs, tokens.len(), None),
            u: tokens.len(),
        };
        if let Decision::Emit(y) = step.decision {
            tokens.push(y);
            state = state.advance(&model.predictor, set, y);
            dec_proj = model.joint.dec.apply_row(set, &state.h);
        }
        steps.push(step);
    }
    Hypothesis {
        tokens,
        path: AlignmentPath { steps },
    }
}

/// Output of one streamed frame.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub h_enc: Vec<f64>,
    /// Joint cell `(t, u)` read before deciding, `u` being the position in
    /// force at this frame.
    pub cell: JointCell,
    pub step: PathStep,
}

/// Frame-synchronous recogniser: streaming encoder plus greedy transducer
/// decoding.
#[derive(Debug, Clone)]
pub struct TransducerStream {
    enc: EncoderStream,
    state: PredState,
    dec_proj: Vec<f64>,
    last_enc_proj: Option<Vec<f64>>,
    tokens: Vec<usize>,
    path: AlignmentPath,
}

impl TransducerStream {
    pub fn new(model: &Transducer, set: &ParamSet) -> Result<Self> {
        let state = PredState::start(&model.predictor, set);
        let dec_proj = model.joint.dec.apply_row(set, &state.h);
        Ok(Self {
            enc: EncoderStream::new(&model.encoder)?,
            state,
            dec_proj,
            last_enc_proj: None,
            tokens: Vec::new(),
            path: AlignmentPath::default(),
        })
    }

    pub fn step(&mut self, model: &Transducer, set: &ParamSet, frame: &[f64]) -> Result<FrameOutput> {
        let h_enc = self.encode(model, set, frame)?;
        Ok(self.decide(model, set, h_enc))
    }

    /// Encoder half of [`TransducerStream::step`].
    pub fn encode(&mut self, model: &Transducer, set: &ParamSet, frame: &[f64]) -> Result<Vec<f64>> {
        self.enc.step(&model.encoder, set, frame)
    }

    /// Greedy decision for the encoder row of the next frame.
    pub fn decide(&mut self, model: &Transducer, set: &ParamSet, h_enc: Vec<f64>) -> FrameOutput {
        let enc_proj = model.joint.enc.apply_row(set, &h_enc);
        let cell = model.joint.cell(set, &enc_proj, &self.dec_proj);
        let step = PathStep {
            decision: decide(&cell.log_probs, self.tokens.len(), None),
            u: self.tokens.len(),
        };
        if let Decision::Emit(y) = step.decision {
            self.tokens.push(y);
            self.state = self.state.advance(&model.predictor, set, y);
            self.dec_proj = model.joint.dec.apply_row(set, &self.state.h);
        }
        self.last_enc_proj = Some(enc_proj);
        self.path.steps.push(step);
        FrameOutput { h_enc, cell, step }
    }

    /// Joint cell at the last frame with the final label position.
    pub fn final_cell(&self, model: &Transducer, set: &ParamSet) -> Result<JointCell> {
        let enc_proj = self
            .last_enc_proj
            .as_ref()
            .ok_or_else(|| Error::contract("no frame has been streamed"))?;
        Ok(model.joint.cell(set, enc_proj, &self.dec_proj))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn path(&self) -> &AlignmentPath {
        &self.path
    }

    pub fn encoder_cache_len(&self) -> usize {
        self.enc.cache_len()
    }
}
