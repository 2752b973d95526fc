//! Two-stage training and held-out evaluation.
//!
//! Stage 1 trains everything on normal speech with the recognition loss plus
//! the code-prediction loss. Stage 2 fine-tunes only the recogniser on
//! batches holding equal numbers of dysarthric and normal utterances.

pub mod corpus;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelBundle;
use crate::numerics::{Graph, ParamSet, Tensor};
use crate::{Error, Result};

pub use corpus::{gen_corpus, Corpus, CorpusSpec, Split, Utterance, Variant};

/// Every field is required when a stage table is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    /// Utterances per batch; in stage 2, per variant.
    pub batch: usize,
    /// Starting Adam step size.
    pub lr: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub rnnt_weight: f64,
    pub tts_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig {
                steps: 6000,
                batch: 4,
                lr: 3e-3,
                clip: 5.0,
            },
            stage2: StageConfig {
                steps: 1000,
                batch: 2,
                lr: 1e-3,
                clip: 5.0,
            },
            rnnt_weight: 1.0,
            tts_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        if !(self.rnnt_weight >= 0.0 && self.tts_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.clip >= 0.0) {
            return Err(Error::Config("lr and clip must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One logged optimisation step; losses are batch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub rnnt_loss: f64,
    pub ce_loss: Option<f64>,
    pub kd_loss: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Parts {
    rnnt: f64,
    ce: f64,
    kd: f64,
    total: f64,
}

/// Parameters stage 2 may change.
pub fn is_transducer_param(name: &str) -> bool {
    name.starts_with("tr.")
}

/// Parameters stage 1 may change: everything but the fixed codebook.
pub fn is_stage1_param(name: &str) -> bool {
    !name.starts_with("cb.")
}

/// Accumulates the gradients of one batch.
struct GradSum {
    sum: Vec<Option<Tensor>>,
}

impl GradSum {
    fn new(set: &ParamSet) -> Self {
        Self {
            sum: vec![None; set.len()],
        }
    }

    fn add(&mut self, grads: Vec<Option<Tensor>>, weight: f64) {
        for (acc, g) in self.sum.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += weight * y;
                    }
                }
                None => {
                    let mut g = g;
                    for x in g.data_mut() {
                        *x *= weight;
                    }
                    *acc = Some(g);
                }
            }
        }
    }

    fn norm(&self) -> f64 {
        self.sum
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// The learning rate falls along a half cosine to this fraction of its start.
const FINAL_LR_SCALE: f64 = 0.05;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam over the parameters that receive gradients; the rest are never
/// touched.
struct Adam {
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    t: i32,
}

impl Adam {
    fn new(set: &ParamSet) -> Self {
        Self {
            moments: vec![None; set.len()],
            t: 0,
        }
    }

    fn lr(cfg: &StageConfig, step: usize) -> f64 {
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let floor = cfg.lr * FINAL_LR_SCALE;
        floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    fn apply(&mut self, set: &mut ParamSet, grads: GradSum, cfg: &StageConfig, step: usize) {
        let norm = grads.norm();
        let scale = if cfg.clip > 0.0 && norm > cfg.clip { cfg.clip / norm } else { 1.0 };
        self.t += 1;
        let lr = Self::lr(cfg, step);
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let ids: Vec<_> = set.ids().collect();
        for ((id, g), slot) in ids.into_iter().zip(grads.sum).zip(&mut self.moments) {
            let Some(g) = g else { continue };
            let (m, v) = slot.get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &d), m), v) in set.get_mut(id).data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let d = d * scale;
                *m = BETA1 * *m + (1.0 - BETA1) * d;
                *v = BETA2 * *v + (1.0 - BETA2) * d * d;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            }
        }
    }
}

fn check_finite(step: usize, parts: &Parts) -> Result<()> {
    if [parts.rnnt, parts.ce, parts.kd, parts.total].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!(
                "rnnt {} ce {} kd {} total {}",
                parts.rnnt, parts.ce, parts.kd, parts.total
            ),
        })
    }
}

/// Non-finite values inside a step mean the optimisation has diverged.
fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(op) => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        e => e,
    }
}

/// Stage-1 objective of one utterance; gradients land in `bundle`'s
/// parameters for which `trainable` holds.
fn stage1_utterance(
    bundle: &ModelBundle,
    utt: &Utterance,
    cfg: &TrainConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(Parts, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let p = bundle.set.bind(&mut g, trainable);
    let x = g.constant(utt.x.clone());
    let tr = &bundle.transducer;
    let h_enc = tr.encode(&mut g, &p, x)?;

    let truth = tr.lattice(&mut g, &p, h_enc, &utt.tokens)?;
    let rnnt = tr.loss(&mut g, &truth, &utt.tokens)?;

    // the adaptor reads the lattice of the model's own hypothesis
    let hyp = crate::transducer::greedy_decode(tr, &bundle.set, g.value(h_enc));
    let lat = tr.lattice(&mut g, &p, h_enc, &hyp.tokens)?;
    let h_apt = bundle.adaptor.forward(&mut g, &p, &lat, &hyp.path)?;
    let tts = bundle.waitk.loss_total(&mut g, &p, h_apt, &utt.codes)?;

    let total = g.weighted_sum(&[(rnnt, cfg.rnnt_weight), (tts.total, cfg.tts_weight)])?;
    let parts = Parts {
        rnnt: g.value(rnnt).item(),
        ce: g.value(tts.ce).item(),
        kd: g.value(tts.kd).item(),
        total: g.value(total).item(),
    };
    if g.requires_grad(total) {
        g.backward(total)?;
    }
    Ok((parts, p.grads(&g)))
}

/// Recognition loss of one utterance with gradients for the transducer.
fn rnnt_utterance(bundle: &ModelBundle, utt: &Utterance, trainable: &dyn Fn(&str) -> bool) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let p = bundle.set.bind(&mut g, trainable);
    let x = g.constant(utt.x.clone());
    let h_enc = bundle.transducer.encode(&mut g, &p, x)?;
    let lat = bundle.transducer.lattice(&mut g, &p, h_enc, &utt.tokens)?;
    let loss = bundle.transducer.loss(&mut g, &lat, &utt.tokens)?;
    let value = g.value(loss).item();
    if g.requires_grad(loss) {
        g.backward(loss)?;
    }
    Ok((value, p.grads(&g)))
}

fn mean_parts(parts: &[Parts]) -> Parts {
    let n = parts.len() as f64;
    let mut m = Parts::default();
    for p in parts {
        m.rnnt += p.rnnt / n;
        m.ce += p.ce / n;
        m.kd += p.kd / n;
        m.total += p.total / n;
    }
    m
}

/// Stage 1 with an explicit trainable-parameter filter.
pub fn stage1_train_with(
    bundle: &mut ModelBundle,
    corpus: &Corpus,
    cfg: &TrainConfig,
    seed: u64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Vec<LogRow>> {
    cfg.stage1.validate()?;
    let pool: Vec<&Utterance> = corpus.iter(Variant::Normal, Split::Train).collect();
    if pool.is_empty() {
        return Err(Error::contract("stage 1 needs normal training utterances"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n = cfg.stage1.batch.min(pool.len());
    let mut log = Vec::with_capacity(cfg.stage1.steps);
    let mut adam = Adam::new(&bundle.set);
    for step in 0..cfg.stage1.steps {
        let mut batch_grads = GradSum::new(&bundle.set);
        let mut parts = Vec::with_capacity(n);
        for i in sample(&mut rng, pool.len(), n) {
            let (p, grads) = stage1_utterance(bundle, pool[i], cfg, trainable).map_err(at_step(step))?;
            batch_grads.add(grads, 1.0 / n as f64);
            parts.push(p);
        }
        let m = mean_parts(&parts);
        check_finite(step, &m)?;
        adam.apply(&mut bundle.set, batch_grads, &cfg.stage1, step);
        log.push(LogRow {
            step,
            rnnt_loss: m.rnnt,
            ce_loss: Some(m.ce),
            kd_loss: Some(m.kd),
            total: m.total,
        });
    }
    Ok(log)
}

/// Stage 1: every module learns from normal utterances.
pub fn stage1_train(bundle: &mut ModelBundle, corpus: &Corpus, cfg: &TrainConfig, seed: u64) -> Result<Vec<LogRow>> {
    stage1_train_with(bundle, corpus, cfg, seed, &is_stage1_param)
}

/// Check that `batch` holds exactly `n` dysarthric and `n` normal utterances.
pub fn check_balanced(batch: &[&Utterance], n: usize) -> Result<()> {
    let dys = batch.iter().filter(|u| u.variant == Variant::Dys).count();
    let normal = batch.len() - dys;
    if dys != n || normal != n {
        return Err(Error::contract(format!(
            "stage-2 batch has {dys} dysarthric and {normal} normal utterances, expected {n} of each"
        )));
    }
    Ok(())
}

/// Both variants of `n` distinct training pairs.
pub fn balanced_batch<'c>(corpus: &'c Corpus, pairs: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&'c Utterance>> {
    if pairs.len() < n {
        return Err(Error::contract(format!("{} training pairs for batch {n}", pairs.len())));
    }
    let mut batch = Vec::with_capacity(2 * n);
    for i in sample(rng, pairs.len(), n) {
        let (normal, dys) = corpus.pair(pairs[i])?;
        batch.push(dys);
        batch.push(normal);
    }
    check_balanced(&batch, n)?;
    Ok(batch)
}

/// Stage 2: fine-tune the recogniser on balanced batches; every other
/// parameter stays bit-identical.
pub fn stage2_finetune(bundle: &mut ModelBundle, corpus: &Corpus, cfg: &TrainConfig, seed: u64) -> Result<Vec<LogRow>> {
    cfg.stage2.validate()?;
    let pairs = corpus.pairs(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let n = cfg.stage2.batch;
    let mut log = Vec::with_capacity(cfg.stage2.steps);
    let mut adam = Adam::new(&bundle.set);
    for step in 0..cfg.stage2.steps {
        let batch = balanced_batch(corpus, &pairs, n, &mut rng)?;
        let mut batch_grads = GradSum::new(&bundle.set);
        let mut loss = 0.0;
        for utt in &batch {
            let (l, grads) = rnnt_utterance(bundle, utt, &is_transducer_param).map_err(at_step(step))?;
            batch_grads.add(grads, 1.0 / batch.len() as f64);
            loss += l / batch.len() as f64;
        }
        check_finite(
            step,
            &Parts {
                rnnt: loss,
                total: loss,
                ..Parts::default()
            },
        )?;
        adam.apply(&mut bundle.set, batch_grads, &cfg.stage2, step);
        log.push(LogRow {
            step,
            rnnt_loss: loss,
            ce_loss: None,
            kd_loss: None,
            total: loss,
        });
    }
    Ok(log)
}

// ----- evaluation ------------------------------------------------------------------

/// Levenshtein distance with unit costs.
pub fn edit_distance(hyp: &[usize], reference: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Edit distance over `max(len(ref), 1)`.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> f64 {
    edit_distance(hyp, reference) as f64 / reference.len().max(1) as f64
}

/// Per-view teacher-forced code prediction quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeScore {
    pub k: usize,
    /// Mean cross-entropy per frame.
    pub ce: f64,
    /// Fraction of frames whose argmax equals the reference code.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    /// Total edits over total reference tokens.
    pub token_error_rate: f64,
    pub codes: Vec<CodeScore>,
}

impl EvalReport {
    pub fn code_score(&self, k: usize) -> Option<CodeScore> {
        self.codes.iter().copied().find(|c| c.k == k)
    }
}

/// Recognition error and teacher-forced code scores for each `k`, with the
/// decoder reading the adaptor frames the model derives from its own
/// recognition of the input.
pub fn evaluate<'a>(bundle: &ModelBundle, utts: impl IntoIterator<Item = &'a Utterance>, ks: &[usize]) -> Result<EvalReport> {
    let mut edits = 0;
    let mut ref_len = 0;
    let mut frames = 0;
    let mut ce = vec![0.0; ks.len()];
    let mut hits = vec![0usize; ks.len()];
    let mut count = 0;
    for utt in utts {
        count += 1;
        let fe = bundle.front_end(&utt.x)?;
        edits += edit_distance(&fe.hypothesis.tokens, &utt.tokens);
        ref_len += utt.tokens.len();
        if ks.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let p = bundle.set.bind(&mut g, |_| false);
        let h = g.constant(fe.h_apt);
        let views = bundle.waitk.forward_views(&mut g, &p, h, &utt.codes, ks)?;
        for (i, &k) in ks.iter().enumerate() {
            let lp = g.value(views.get(k)?);
            for (j, &c) in utt.codes.iter().enumerate() {
                let row = lp.row(j);
                ce[i] -= row[c];
                hits[i] += usize::from(crate::numerics::kernels::argmax(row) == c);
            }
        }
        frames += utt.codes.len();
    }
    if count == 0 {
        return Err(Error::contract("evaluation set is empty"));
    }
    let frames = frames.max(1) as f64;
    Ok(EvalReport {
        utterances: count,
        token_error_rate: edits as f64 / ref_len.max(1) as f64,
        codes: ks
            .iter()
            .enumerate()
            .map(|(i, &k)| CodeScore {
                k,
                ce: ce[i] / frames,
                accuracy: hits[i] as f64 / frames,
            })
            .collect(),
    })
}
