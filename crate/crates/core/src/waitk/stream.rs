use crate::layers::attend_row;
use crate::numerics::{kernels, ParamSet};
use crate::{Error, Result};

use super::{Visibility, WaitKModel};

/// Incremental wait-k decoding. Each adaptor frame extends the frame stream
/// by one token; code `j` is emitted as soon as frame `j + k - 1` has been
/// pushed, or at [`WaitKStream::finish`] for the tail.
#[derive(Debug, Clone)]
pub struct WaitKStream {
    k: usize,
    /// Per layer, keys and values of frame tokens (the end token last).
    frame_k: Vec<Vec<Vec<f64>>>,
    frame_v: Vec<Vec<Vec<f64>>>,
    code_k: Vec<Vec<Vec<f64>>>,
    code_v: Vec<Vec<Vec<f64>>>,
    apt: Vec<Vec<f64>>,
    emitted: Vec<usize>,
    ended: bool,
}

impl WaitKStream {
    pub fn new(model: &WaitKModel, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        let layers = model.blocks.len();
        Ok(Self {
            k,
            frame_k: vec![Vec::new(); layers],
            frame_v: vec![Vec::new(); layers],
            code_k: vec![Vec::new(); layers],
            code_v: vec![Vec::new(); layers],
            apt: Vec::new(),
            emitted: Vec::new(),
            ended: false,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn frames(&self) -> usize {
        self.apt.len()
    }

    pub fn codes(&self) -> &[usize] {
        &self.emitted
    }

    /// Push adaptor frame `h_apt`; returns the codes that became due.
    pub fn push(&mut self, model: &WaitKModel, set: &ParamSet, h_apt: &[f64]) -> Result<Vec<usize>> {
        if self.ended {
            return Err(Error::contract("frame pushed after end of stream"));
        }
        if h_apt.len() != model.input_dim {
            return Err(Error::dims("wait-k frame", &[h_apt.len()], &[model.input_dim]));
        }
        let x = model.frame_in.apply_row(set, h_apt);
        self.extend_frames(model, set, x);
        self.apt.push(h_apt.to_vec());
        self.drain(model, set)
    }

    /// Close the stream and emit every remaining code.
    pub fn finish(&mut self, model: &WaitKModel, set: &ParamSet) -> Result<Vec<usize>> {
        if self.ended {
            return Ok(Vec::new());
        }
        if self.apt.is_empty() {
            return Err(Error::contract("wait-k stream finished without frames"));
        }
        self.extend_frames(model, set, set.get(model.end).data().to_vec());
        self.ended = true;
        self.drain(model, set)
    }

    fn extend_frames(&mut self, model: &WaitKModel, set: &ParamSet, mut x: Vec<f64>) {
        let pos = self.frame_k[0].len();
        let last = model.blocks.len() - 1;
        for (l, block) in model.blocks.iter().enumerate() {
            let qkv = block.qkv_row(set, &x);
            self.frame_k[l].push(qkv.k);
            self.frame_v[l].push(qkv.v);
            if l == last {
                break;
            }
            let keys: Vec<&[f64]> = self.frame_k[l].iter().map(Vec::as_slice).collect();
            let vals: Vec<&[f64]> = self.frame_v[l].iter().map(Vec::as_slice).collect();
            let bias = set.get(model.rel_bias[l]).data();
            let width = bias.len() / block.heads;
            let att = attend_row(&qkv.q, &keys, &vals, block.heads, |h, i| {
                bias[h * width + model.frame_slot(pos, i)]
            });
            x = block.finish_row(set, &x, &att);
        }
    }

    fn drain(&mut self, model: &WaitKModel, set: &ParamSet) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        loop {
            let j = self.emitted.len();
            let n = self.apt.len();
            let due = if self.ended { j < n } else { j.saturating_add(self.k) <= n };
            if !due {
                return Ok(out);
            }
            let code = self.emit(model, set, j)?;
            self.emitted.push(code);
            out.push(code);
        }
    }

    fn emit(&mut self, model: &WaitKModel, set: &ParamSet, j: usize) -> Result<usize> {
        // Before the end the stream length is unknown, but any length at
        // least `frames` gives the same key list for a due row.
        let vis = Visibility::new(self.apt.len(), self.k);
        let keys = model.code_keys(&vis, j);
        let t = vis.frames;
        let prev = if j == 0 { model.start_code() } else { self.emitted[j - 1] };
        let mut input = self.apt[j].clone();
        input.extend_from_slice(set.get(model.code_emb).row(prev));
        let mut x = model.code_in.apply_row(set, &input);
        let reach = set.get(model.reach).row(model.reach_slot(&vis, j));
        for (v, r) in x.iter_mut().zip(reach) {
            *v += r;
        }
        for (l, block) in model.blocks.iter().enumerate() {
            let qkv = block.qkv_row(set, &x);
            self.code_k[l].push(qkv.k);
            self.code_v[l].push(qkv.v);
            let ks: Vec<&[f64]> = keys
                .iter()
                .map(|&(i, _)| if i <= t { self.frame_k[l][i].as_slice() } else { self.code_k[l][i - t - 1].as_slice() })
                .collect();
            let vs: Vec<&[f64]> = keys
                .iter()
                .map(|&(i, _)| if i <= t { self.frame_v[l][i].as_slice() } else { self.code_v[l][i - t - 1].as_slice() })
                .collect();
            let bias = set.get(model.rel_bias[l]).data();
            let width = bias.len() / block.heads;
            let att = attend_row(&qkv.q, &ks, &vs, block.heads, |h, i| bias[h * width + keys[i].1]);
            x = block.finish_row(set, &x, &att);
        }
        let h = model.final_ln.apply_row(set, &x);
        let z = model.out.apply_row(set, &h);
        let mut lp = vec![0.0; z.len()];
        kernels::log_softmax_row(&z, &mut lp);
        Ok(kernels::argmax(&lp))
    }
}
