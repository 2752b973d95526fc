//! Decoder-only code predictor under a wait-k visibility policy.
//!
//! The decoder runs two token streams through shared transformer blocks.
//! Frame tokens (one per adaptor frame, then an end-of-stream token) attend
//! causally among themselves and never depend on `k`. Code tokens, one per
//! output position, carry the adaptor frame and the previous code; code `j`
//! attends to frame tokens `s < j + k`, to the end token when the stream
//! ended before `j + k`, and to code tokens `<= j`. Every view of the model
//! shares one frame stream, so several `k` cost one frame pass.

mod stream;

pub use stream::WaitKStream;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{lookup, Block, LayerNorm, Linear};
use crate::numerics::{kernels, AttnMask, Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::{Error, Result};

pub const PREFIX: &str = "wk";

/// A `k` that makes every row see the whole stream.
pub const FULL_CONTEXT: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaitKConfig {
    /// Views trained with cross-entropy.
    pub ks: Vec<usize>,
    /// Distance from a student view to its teacher view.
    pub teacher_offset: usize,
    /// Weight of the distillation term.
    pub alpha: f64,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Relative offsets are clipped to `[-max_rel, max_rel]`.
    pub max_rel: usize,
}

impl Default for WaitKConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 10, 20],
            teacher_offset: 10,
            alpha: 0.2,
            num_layers: 2,
            model_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            max_rel: 24,
        }
    }
}

impl WaitKConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("wait-k ks must be non-empty and all >= 1".into()));
        }
        if self.teacher_offset == 0 {
            return Err(Error::Config("teacher_offset must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} is outside [0, 1]", self.alpha)));
        }
        if self.num_layers == 0 || !self.model_dim.is_multiple_of(self.num_heads.max(1)) || self.num_heads == 0 {
            return Err(Error::Config("wait-k model_dim must be a positive multiple of num_heads".into()));
        }
        Ok(())
    }

    /// Student views that have a teacher inside the trained range.
    pub fn kd_students(&self) -> Vec<usize> {
        let max = self.ks.iter().copied().max().unwrap_or(0);
        self.ks
            .iter()
            .copied()
            .filter(|k| k + self.teacher_offset <= max)
            .collect()
    }
}

/// What a code row may attend to for sequence length `frames`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visibility {
    pub frames: usize,
    pub k: usize,
}

impl Visibility {
    pub fn new(frames: usize, k: usize) -> Self {
        Self { frames, k }
    }

    /// Number of adaptor frames visible to row `j`.
    pub fn frames_visible(&self, j: usize) -> usize {
        j.saturating_add(self.k).min(self.frames)
    }

    pub fn sees_frame(&self, j: usize, s: usize) -> bool {
        s < self.frames_visible(j)
    }

    /// The end token sits at input position `frames`.
    pub fn sees_end(&self, j: usize) -> bool {
        self.frames < j.saturating_add(self.k)
    }

    pub fn sees_code(&self, j: usize, i: usize) -> bool {
        i < j
    }

    /// `[rows, frames + 1 + rows]` 0/1 matrix over `[frames, end, codes]`
    /// where a code column `i` means "code `i` is known", i.e. `i < j`.
    pub fn matrix(&self) -> Vec<Vec<u8>> {
        (0..self.frames)
            .map(|j| {
                let mut row: Vec<u8> = (0..self.frames).map(|s| u8::from(self.sees_frame(j, s))).collect();
                row.push(u8::from(self.sees_end(j)));
                row.extend((0..self.frames).map(|i| u8::from(self.sees_code(j, i))));
                row
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Pair {
    FrameFrame = 0,
    CodeFrame = 1,
    CodeEnd = 2,
    CodeCode = 3,
}

/// Log-probability rows of several views of one utterance.
#[derive(Debug, Clone, Default)]
pub struct Views {
    views: BTreeMap<usize, Var>,
}

impl Views {
    pub fn get(&self, k: usize) -> Result<Var> {
        self.views
            .get(&k)
            .copied()
            .ok_or_else(|| Error::contract(format!("view k={k} was not computed")))
    }

    pub fn ks(&self) -> impl Iterator<Item = usize> + '_ {
        self.views.keys().copied()
    }
}

/// The three loss terms of one utterance.
#[derive(Debug, Clone, Copy)]
pub struct TtsLoss {
    pub ce: Var,
    pub kd: Var,
    pub total: Var,
}

#[derive(Debug, Clone)]
pub struct WaitKModel {
    pub cfg: WaitKConfig,
    pub vocab: usize,
    pub input_dim: usize,
    pub frame_in: Linear,
    pub code_in: Linear,
    pub code_emb: ParamId,
    pub end: ParamId,
    /// Per code row, an embedding of how far it can see; see
    /// [`WaitKModel::reach_slot`].
    pub reach: ParamId,
    pub blocks: Vec<Block>,
    pub rel_bias: Vec<ParamId>,
    pub final_ln: LayerNorm,
    pub out: Linear,
}

impl WaitKModel {
    fn bias_width(cfg: &WaitKConfig) -> usize {
        4 * (2 * cfg.max_rel + 1)
    }

    /// `input_dim` is the adaptor width, `vocab` the number of codes.
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet,
        cfg: &WaitKConfig,
        input_dim: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let frame_in = Linear::init(set, &format!("{PREFIX}.frame_in"), d, input_dim, true, rng)?;
        let code_in = Linear::init(set, &format!("{PREFIX}.code_in"), d, input_dim + d, true, rng)?;
        let code_emb = set.insert(format!("{PREFIX}.code_emb"), Tensor::randn(&[vocab + 1, d], 1.0, rng))?;
        let end = set.insert(format!("{PREFIX}.end"), Tensor::randn(&[1, d], 1.0, rng))?;
        let reach = set.insert(format!("{PREFIX}.reach"), Tensor::zeros(&[Self::reach_rows(cfg), d]))?;
        let mut blocks = Vec::new();
        let mut rel_bias = Vec::new();
        for l in 0..cfg.num_layers {
            blocks.push(Block::init(set, &format!("{PREFIX}.l{l}"), d, cfg.ffn_dim, cfg.num_heads, rng)?);
            rel_bias.push(set.insert(format!("{PREFIX}.l{l}.rel"), Self::distance_prior(cfg))?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            input_dim,
            frame_in,
            code_in,
            code_emb,
            end,
            reach,
            blocks,
            rel_bias,
            final_ln: LayerNorm::init(set, &format!("{PREFIX}.ln"), d)?,
            out: Linear::init(set, &format!("{PREFIX}.out"), vocab, d, true, rng)?,
        })
    }

    /// Initial relative bias: head `h` penalises distance with slope
    /// `2^(-8(h+1)/H)`, so wide views start out focused near the query.
    /// The end token starts unbiased.
    fn distance_prior(cfg: &WaitKConfig) -> Tensor {
        let width = 2 * cfg.max_rel + 1;
        let mut bias = Tensor::zeros(&[cfg.num_heads, Self::bias_width(cfg)]);
        for h in 0..cfg.num_heads {
            let slope = (-8.0 * (h + 1) as f64 / cfg.num_heads as f64).exp2();
            let row = &mut bias.data_mut()[h * 4 * width..(h + 1) * 4 * width];
            for pair in [Pair::FrameFrame, Pair::CodeFrame, Pair::CodeCode] {
                for (i, b) in row[pair as usize * width..][..width].iter_mut().enumerate() {
                    *b = -slope * (i as f64 - cfg.max_rel as f64).abs();
                }
            }
        }
        bias
    }

    pub fn resolve(set: &ParamSet, cfg: &WaitKConfig, input_dim: usize, vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut blocks = Vec::new();
        let mut rel_bias = Vec::new();
        for l in 0..cfg.num_layers {
            blocks.push(Block::resolve(set, &format!("{PREFIX}.l{l}"), d, cfg.ffn_dim, cfg.num_heads)?);
            rel_bias.push(lookup(
                set,
                &format!("{PREFIX}.l{l}.rel"),
                &[cfg.num_heads, Self::bias_width(cfg)],
            )?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            input_dim,
            frame_in: Linear::resolve(set, &format!("{PREFIX}.frame_in"), d, input_dim, true)?,
            code_in: Linear::resolve(set, &format!("{PREFIX}.code_in"), d, input_dim + d, true)?,
            code_emb: lookup(set, &format!("{PREFIX}.code_emb"), &[vocab + 1, d])?,
            end: lookup(set, &format!("{PREFIX}.end"), &[1, d])?,
            reach: lookup(set, &format!("{PREFIX}.reach"), &[Self::reach_rows(cfg), d])?,
            blocks,
            rel_bias,
            final_ln: LayerNorm::resolve(set, &format!("{PREFIX}.ln"), d)?,
            out: Linear::resolve(set, &format!("{PREFIX}.out"), vocab, d, true)?,
        })
    }

    /// Reserved history symbol standing in for the code before the first.
    pub fn start_code(&self) -> usize {
        self.vocab
    }

    fn reach_rows(cfg: &WaitKConfig) -> usize {
        2 * (cfg.max_rel + 1)
    }

    /// Row of the reach table for code row `j`: the number of frames it sees
    /// at or after its own, clipped to `max_rel`, and whether it sees the end
    /// token. Both follow from what the row may attend to.
    pub fn reach_slot(&self, vis: &Visibility, j: usize) -> usize {
        let ahead = (vis.frames_visible(j) - j).min(self.cfg.max_rel);
        usize::from(vis.sees_end(j)) * (self.cfg.max_rel + 1) + ahead
    }

    fn slot(&self, pair: Pair, offset: i64) -> usize {
        let r = self.cfg.max_rel as i64;
        let width = 2 * self.cfg.max_rel + 1;
        pair as usize * width + (offset.clamp(-r, r) + r) as usize
    }

    /// Frame-stream mask over `[frames, end]`: causal.
    fn frame_mask(&self, frames: usize) -> AttnMask {
        let rows = (0..=frames)
            .map(|s| {
                (0..=s)
                    .map(|i| (i, self.slot(Pair::FrameFrame, s as i64 - i as i64)))
                    .collect()
            })
            .collect();
        AttnMask {
            rows,
            n_bias: Self::bias_width(&self.cfg),
        }
    }

    /// Key list of code row `j`, in summation order, as
    /// `(index into [frames, end, codes], bias slot)`.
    pub(crate) fn code_keys(&self, vis: &Visibility, j: usize) -> Vec<(usize, usize)> {
        let t = vis.frames;
        let mut keys: Vec<(usize, usize)> = (0..vis.frames_visible(j))
            .map(|s| (s, self.slot(Pair::CodeFrame, j as i64 - s as i64)))
            .collect();
        if vis.sees_end(j) {
            keys.push((t, self.slot(Pair::CodeEnd, j as i64 - t as i64)));
        }
        keys.extend((0..=j).map(|i| (t + 1 + i, self.slot(Pair::CodeCode, j as i64 - i as i64))));
        keys
    }

    pub(crate) fn frame_slot(&self, query: usize, key: usize) -> usize {
        self.slot(Pair::FrameFrame, query as i64 - key as i64)
    }

    fn code_mask(&self, frames: usize, k: usize) -> AttnMask {
        let vis = Visibility::new(frames, k);
        AttnMask {
            rows: (0..frames).map(|j| self.code_keys(&vis, j)).collect(),
            n_bias: Self::bias_width(&self.cfg),
        }
    }

    fn check(&self, g: &Graph, h_apt: Var, codes: &[usize]) -> Result<usize> {
        let frames = g.value(h_apt).rows();
        if frames == 0 {
            return Err(Error::contract("wait-k decoder needs at least one frame"));
        }
        if codes.len() != frames {
            return Err(Error::contract(format!(
                "{} codes for {frames} adaptor frames",
                codes.len()
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c >= self.vocab) {
            return Err(Error::Index {
                what: "code",
                index: bad,
                len: self.vocab,
            });
        }
        Ok(frames)
    }

    /// Log-distributions `[T, vocab]` of every view in `ks`; row `j` of a
    /// view predicts `codes[j]` with `codes[..j]` as history.
    pub fn forward_views(&self, g: &mut Graph, p: &Bound, h_apt: Var, codes: &[usize], ks: &[usize]) -> Result<Views> {
        let frames = self.check(g, h_apt, codes)?;
        let mut ks: Vec<usize> = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        if ks.contains(&0) {
            return Err(Error::contract("k must be at least 1"));
        }

        let f = self.frame_in.forward(g, p, h_apt)?;
        let mut xf = g.concat_rows(&[f, p.var(self.end)])?;

        let mut prev = Vec::with_capacity(frames);
        prev.push(self.start_code());
        prev.extend_from_slice(&codes[..frames - 1]);
        let e = g.gather_rows(p.var(self.code_emb), &prev)?;
        let ci = g.concat_cols(&[h_apt, e])?;
        let xc0 = self.code_in.forward(g, p, ci)?;
        let mut xcs = Vec::with_capacity(ks.len());
        for &k in &ks {
            let vis = Visibility::new(frames, k);
            let slots: Vec<usize> = (0..frames).map(|j| self.reach_slot(&vis, j)).collect();
            let r = g.gather_rows(p.var(self.reach), &slots)?;
            xcs.push(g.add(xc0, r)?);
        }

        let frame_mask = Rc::new(self.frame_mask(frames));
        let code_masks: Vec<Rc<AttnMask>> = ks.iter().map(|&k| Rc::new(self.code_mask(frames, k))).collect();
        let last = self.blocks.len() - 1;
        for (l, block) in self.blocks.iter().enumerate() {
            let bias = p.var(self.rel_bias[l]);
            let fq = block.qkv(g, p, xf)?;
            for (xc, mask) in xcs.iter_mut().zip(&code_masks) {
                let cq = block.qkv(g, p, *xc)?;
                let keys = g.concat_rows(&[fq.k, cq.k])?;
                let vals = g.concat_rows(&[fq.v, cq.v])?;
                let att = g.attention(cq.q, keys, vals, block.heads, mask.clone(), Some(bias))?;
                *xc = block.finish(g, p, *xc, att)?;
            }
            // the last layer's frame outputs feed nothing
            if l < last {
                let att = g.attention(fq.q, fq.k, fq.v, block.heads, frame_mask.clone(), Some(bias))?;
                xf = block.finish(g, p, xf, att)?;
            }
        }
        let mut views = BTreeMap::new();
        for (&k, xc) in ks.iter().zip(xcs) {
            let h = self.final_ln.forward(g, p, xc)?;
            let z = self.out.forward(g, p, h)?;
            views.insert(k, g.log_softmax(z)?);
        }
        Ok(Views { views })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, h_apt: Var, codes: &[usize], k: usize) -> Result<Var> {
        self.forward_views(g, p, h_apt, codes, &[k])?.get(k)
    }

    /// Every row sees every frame and the end token.
    pub fn forward_full(&self, g: &mut Graph, p: &Bound, h_apt: Var, codes: &[usize]) -> Result<Var> {
        self.forward(g, p, h_apt, codes, FULL_CONTEXT)
    }

    /// Views needed by [`Self::loss_total`].
    pub fn loss_views(&self) -> Vec<usize> {
        let mut ks = self.cfg.ks.clone();
        ks.extend(self.cfg.kd_students().iter().map(|k| k + self.cfg.teacher_offset));
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    /// `sum over ks` of the mean cross-entropy of each view.
    pub fn loss_ce(&self, g: &mut Graph, views: &Views, codes: &[usize], ks: &[usize]) -> Result<Var> {
        if ks.is_empty() {
            return Err(Error::contract("loss_ce needs at least one k"));
        }
        let mut terms = Vec::with_capacity(ks.len());
        for &k in ks {
            terms.push((g.cross_entropy(views.get(k)?, codes)?, 1.0));
        }
        g.weighted_sum(&terms)
    }

    /// `sum over students` of `KL(student_k || teacher_{k+offset})` summed
    /// over rows, teacher rows detached.
    pub fn loss_kd(&self, g: &mut Graph, views: &Views, students: &[usize], offset: usize) -> Result<Var> {
        let mut terms = Vec::with_capacity(students.len());
        for &k in students {
            let teacher = views.get(k.saturating_add(offset))?;
            terms.push((g.kl_divergence(views.get(k)?, teacher, true)?, 1.0));
        }
        g.weighted_sum(&terms)
    }

    /// `(1 - alpha) * CE + alpha * KD` over the configured views.
    pub fn loss_total(&self, g: &mut Graph, p: &Bound, h_apt: Var, codes: &[usize]) -> Result<TtsLoss> {
        let views = self.forward_views(g, p, h_apt, codes, &self.loss_views())?;
        self.loss_from_views(g, &views, codes)
    }

    pub fn loss_from_views(&self, g: &mut Graph, views: &Views, codes: &[usize]) -> Result<TtsLoss> {
        let ce = self.loss_ce(g, views, codes, &self.cfg.ks)?;
        let kd = self.loss_kd(g, views, &self.cfg.kd_students(), self.cfg.teacher_offset)?;
        let a = self.cfg.alpha;
        let total = g.weighted_sum(&[(ce, 1.0 - a), (kd, a)])?;
        Ok(TtsLoss { ce, kd, total })
    }

    /// Log-probabilities of one view without recording gradients.
    pub fn log_probs(&self, set: &ParamSet, h_apt: &Tensor, codes: &[usize], k: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = set.bind(&mut g, |_| false);
        let h = g.constant(h_apt.clone());
        let lp = self.forward(&mut g, &p, h, codes, k)?;
        Ok(g.value(lp).clone())
    }

    /// Greedy decoding on the whole graph, one code at a time. Row `j` only
    /// reads codes before `j`, so later placeholders never matter.
    pub fn decode_offline(&self, set: &ParamSet, h_apt: &Tensor, k: usize) -> Result<Vec<usize>> {
        let mut codes = vec![0; h_apt.rows()];
        for j in 0..codes.len() {
            let lp = self.log_probs(set, h_apt, &codes, k)?;
            codes[j] = kernels::argmax(lp.row(j));
        }
        Ok(codes)
    }

    /// Multiply-accumulates for one streamed frame: one frame token and one
    /// code token through every layer, attention over `context` frames.
    pub fn macs_per_frame(&self, context: usize) -> usize {
        let d = self.cfg.model_dim;
        let mut total = self.frame_in.macs() + self.code_in.macs() + self.out.macs();
        for block in &self.blocks {
            // frame token over `context` keys, code token over frames and codes
            total += 2 * block.dense_macs() + 2 * d * context + 2 * d * (2 * context);
        }
        total
    }
}
