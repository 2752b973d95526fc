//! Frame-driven streaming runtime and its latency accounting.
//!
//! A [`StreamSession`] pushes one input frame at a time through the
//! recogniser, the adaptor, the wait-k decoder and the chunk vocoder, and
//! logs every unit of work against a clock. Input frame `i` arrives at
//! `i * frame_duration`; the end of input is known together with the last
//! frame. The logical clock charges configured per-stage costs, the wall
//! clock charges measured time. Either way a stage never starts before the
//! frame that feeds it has arrived.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adaptor::AdaptorStream;
use crate::model::ModelBundle;
use crate::numerics::Tensor;
use crate::quantizer::{chunk_vocode, ChunkVocoder};
use crate::transducer::TransducerStream;
use crate::waitk::{WaitKStream, FULL_CONTEXT};
use crate::{Error, Result};

/// `k` of the sentence-level preset: nothing is emitted before the input
/// has ended.
pub const SENTENCE_LEVEL: usize = FULL_CONTEXT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encoder,
    Transducer,
    Adaptor,
    Waitk,
    Vocoder,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Encoder,
        Stage::Transducer,
        Stage::Adaptor,
        Stage::Waitk,
        Stage::Vocoder,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Wall,
    #[default]
    Logical,
}

impl std::str::FromStr for ClockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wall" => Ok(ClockMode::Wall),
            "logical" => Ok(ClockMode::Logical),
            other => Err(Error::Config(format!("unknown clock {other:?}, expected wall or logical"))),
        }
    }
}

/// Logical-clock charge, in seconds, for one unit of each stage: a frame for
/// the encoder, the transducer and the adaptor, a code for the decoder and
/// the vocoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageCosts {
    pub encoder: f64,
    pub transducer: f64,
    pub adaptor: f64,
    pub waitk: f64,
    pub vocoder: f64,
}

impl Default for StageCosts {
    fn default() -> Self {
        Self {
            encoder: 0.012,
            transducer: 0.004,
            adaptor: 0.002,
            waitk: 0.008,
            vocoder: 0.002,
        }
    }
}

impl StageCosts {
    pub fn zero() -> Self {
        Self {
            encoder: 0.0,
            transducer: 0.0,
            adaptor: 0.0,
            waitk: 0.0,
            vocoder: 0.0,
        }
    }

    pub fn of(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Encoder => self.encoder,
            Stage::Transducer => self.transducer,
            Stage::Adaptor => self.adaptor,
            Stage::Waitk => self.waitk,
            Stage::Vocoder => self.vocoder,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            encoder: self.encoder * factor,
            transducer: self.transducer * factor,
            adaptor: self.adaptor * factor,
            waitk: self.waitk * factor,
            vocoder: self.vocoder * factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seconds of input per frame.
    pub frame_duration: f64,
    /// Codes per vocoder chunk.
    pub chunk_size: usize,
    pub clock: ClockMode,
    pub costs: StageCosts,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frame_duration: 0.04,
            chunk_size: 4,
            clock: ClockMode::Logical,
            costs: StageCosts::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_duration > 0.0 && self.frame_duration.is_finite()) {
            return Err(Error::Config("frame_duration must be positive".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be at least 1".into()));
        }
        if Stage::ALL.iter().any(|&s| !(self.costs.of(s) >= 0.0)) {
            return Err(Error::Config("stage costs must be non-negative".into()));
        }
        Ok(())
    }
}

/// One entry of a session's event log. Times are seconds on the session
/// clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Arrival { frame: usize, at: f64 },
    /// `units` frames or codes processed by `stage` from `start` on.
    Work {
        stage: Stage,
        units: usize,
        start: f64,
        cost: f64,
    },
    /// A vocoder chunk covering codes `first_code..first_code + codes`.
    Emit {
        chunk: usize,
        first_code: usize,
        codes: usize,
        at: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub total_s: f64,
    pub per_frame_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// From the first input arrival to the first emitted chunk.
    pub first_response_s: f64,
    /// Total compute time over total input duration.
    pub rtf: f64,
    pub params: usize,
    pub flops_per_frame: usize,
    pub per_stage: Vec<StageTiming>,
}

/// Static model size figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub params: usize,
    pub flops_per_frame: usize,
}

/// Trainable scalars and the flops of one streamed frame, two per
/// multiply-accumulate. Decoder attention is counted over the encoder's
/// look-back plus the current frame; the vocoder is a table lookup.
pub fn count_params_flops(bundle: &ModelBundle) -> Counts {
    let context = bundle.cfg.transducer.encoder.left_context + 1;
    let macs = bundle.transducer.macs_per_frame()
        + bundle.adaptor.macs_per_frame()
        + bundle.waitk.macs_per_frame(context);
    Counts {
        params: bundle.param_counts().total(),
        flops_per_frame: 2 * macs,
    }
}

/// Reduce an event log to a latency report.
pub fn measure_latency(events: &[Event], frame_duration: f64, counts: Counts) -> Result<LatencyReport> {
    if events.is_empty() {
        return Err(Error::contract("event log is empty"));
    }
    let mut first_in = None;
    let mut first_out = None;
    let mut frames = 0;
    let mut totals = [0.0; 5];
    for e in events {
        match *e {
            Event::Arrival { at, .. } => {
                frames += 1;
                first_in.get_or_insert(at);
            }
            Event::Emit { at, .. } => {
                first_out.get_or_insert(at);
            }
            Event::Work { stage, cost, .. } => totals[stage as usize] += cost,
        }
    }
    let (Some(first_in), Some(first_out)) = (first_in, first_out) else {
        return Err(Error::contract("event log needs an arrival and an emission"));
    };
    let duration = frames as f64 * frame_duration;
    Ok(LatencyReport {
        first_response_s: first_out - first_in,
        rtf: totals.iter().sum::<f64>() / duration,
        params: counts.params,
        flops_per_frame: counts.flops_per_frame,
        per_stage: Stage::ALL
            .iter()
            .map(|&stage| StageTiming {
                stage,
                total_s: totals[stage as usize],
                per_frame_s: totals[stage as usize] / frames as f64,
            })
            .collect(),
    })
}

/// Arrival time of input frame `i`.
pub fn arrival(i: usize, frame_duration: f64) -> f64 {
    i as f64 * frame_duration
}

/// Index of the input frame whose arrival first allows code `j` under wait-k
/// for `frames` input frames.
pub fn policy_frame(j: usize, k: usize, frames: usize) -> usize {
    j.saturating_add(k).min(frames - 1)
}

struct Clock {
    mode: ClockMode,
    costs: StageCosts,
    now: f64,
}

impl Clock {
    /// Run `f` as `stage` work; `units` counts what it processed.
    fn charge<T>(
        &mut self,
        log: &mut Vec<Event>,
        stage: Stage,
        f: impl FnOnce() -> Result<T>,
        units: impl Fn(&T) -> usize,
    ) -> Result<T> {
        let start = self.now;
        let t0 = Instant::now();
        let out = f()?;
        let n = units(&out);
        let cost = match self.mode {
            ClockMode::Logical => self.costs.of(stage) * n as f64,
            ClockMode::Wall => t0.elapsed().as_secs_f64(),
        };
        self.now = start + cost;
        log.push(Event::Work {
            stage,
            units: n,
            start,
            cost,
        });
        Ok(out)
    }
}

/// Per-utterance streaming state over a read-only model.
pub struct StreamSession<'m> {
    bundle: &'m ModelBundle,
    cfg: PipelineConfig,
    k: usize,
    clock: Clock,
    transducer: TransducerStream,
    adaptor: AdaptorStream,
    waitk: WaitKStream,
    vocoder: ChunkVocoder,
    events: Vec<Event>,
    frames: usize,
    ended: bool,
    codes: Vec<usize>,
    chunks: Vec<Tensor>,
    vocoded: usize,
}

/// Everything a finished session produced.
#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub k: usize,
    pub codes: Vec<usize>,
    pub chunks: Vec<Tensor>,
    /// Tokens the recogniser emitted.
    pub tokens: Vec<usize>,
    pub events: Vec<Event>,
    pub report: LatencyReport,
}

impl<'m> StreamSession<'m> {
    pub fn new(bundle: &'m ModelBundle, k: usize, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            bundle,
            cfg: cfg.clone(),
            k,
            clock: Clock {
                mode: cfg.clock,
                costs: cfg.costs,
                now: 0.0,
            },
            transducer: TransducerStream::new(&bundle.transducer, &bundle.set)?,
            adaptor: AdaptorStream::new(),
            waitk: WaitKStream::new(&bundle.waitk, k)?,
            vocoder: ChunkVocoder::new(cfg.chunk_size)?,
            events: Vec::new(),
            frames: 0,
            ended: false,
            codes: Vec::new(),
            chunks: Vec::new(),
            vocoded: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Feed the next input frame; returns the chunks it released.
    pub fn push_frame(&mut self, frame: &[f64]) -> Result<Vec<Tensor>> {
        if self.ended {
            return Err(Error::contract("frame pushed after end of input"));
        }
        if frame.len() != self.bundle.feature_dim {
            return Err(Error::dims("input frame", &[frame.len()], &[self.bundle.feature_dim]));
        }
        let (b, i) = (self.bundle, self.frames);
        let at = arrival(i, self.cfg.frame_duration);
        self.clock.now = self.clock.now.max(at);
        self.events.push(Event::Arrival { frame: i, at });
        self.frames += 1;

        let (clock, log, tr) = (&mut self.clock, &mut self.events, &mut self.transducer);
        let h_enc = clock.charge(log, Stage::Encoder, || tr.encode(&b.transducer, &b.set, frame), |_| 1)?;
        let out = clock.charge(log, Stage::Transducer, || Ok(tr.decide(&b.transducer, &b.set, h_enc)), |_| 1)?;
        let apt = &mut self.adaptor;
        let released = clock.charge(
            log,
            Stage::Adaptor,
            || Ok(apt.push(&b.adaptor, &b.set, out.h_enc, &out.cell.h_joint)),
            |r| usize::from(r.is_some()),
        )?;
        let mut chunks = Vec::new();
        if let Some(f) = released {
            let wk = &mut self.waitk;
            let due = clock.charge(log, Stage::Waitk, || wk.push(&b.waitk, &b.set, &f.h_apt), Vec::len)?;
            chunks = self.vocode(due)?;
        }
        Ok(chunks)
    }

    /// Close the input: release the last adaptor frame and every pending
    /// code and chunk.
    pub fn finish(&mut self) -> Result<Vec<Tensor>> {
        if self.ended {
            return Err(Error::contract("session already finished"));
        }
        if self.frames == 0 {
            return Err(Error::contract("session finished without input frames"));
        }
        self.ended = true;
        let b = self.bundle;
        let (clock, log, tr) = (&mut self.clock, &mut self.events, &self.transducer);
        let cell = clock.charge(log, Stage::Transducer, || tr.final_cell(&b.transducer, &b.set), |_| 0)?;
        let apt = &mut self.adaptor;
        let last = clock.charge(
            log,
            Stage::Adaptor,
            || Ok(apt.finish(&b.adaptor, &b.set, &cell.h_joint)),
            |r| usize::from(r.is_some()),
        )?;
        let wk = &mut self.waitk;
        let due = clock.charge(
            log,
            Stage::Waitk,
            || {
                let mut due = match &last {
                    Some(f) => wk.push(&b.waitk, &b.set, &f.h_apt)?,
                    None => Vec::new(),
                };
                due.extend(wk.finish(&b.waitk, &b.set)?);
                Ok(due)
            },
            Vec::len,
        )?;
        let mut chunks = self.vocode(due)?;
        let voc = &mut self.vocoder;
        let tail = self
            .clock
            .charge(&mut self.events, Stage::Vocoder, || voc.finish(&b.codebook), |_| 0)?;
        if let Some(chunk) = tail {
            self.emit(&chunk)?;
            chunks.push(chunk);
        }
        Ok(chunks)
    }

    fn vocode(&mut self, codes: Vec<usize>) -> Result<Vec<Tensor>> {
        let b = self.bundle;
        let mut chunks = Vec::new();
        for code in codes {
            self.codes.push(code);
            let voc = &mut self.vocoder;
            let chunk = self
                .clock
                .charge(&mut self.events, Stage::Vocoder, || voc.push(&b.codebook, code), |_| 1)?;
            if let Some(chunk) = chunk {
                self.emit(&chunk)?;
                chunks.push(chunk);
            }
        }
        Ok(chunks)
    }

    /// Log a chunk, checking it against the earliest time the policy allows.
    fn emit(&mut self, chunk: &Tensor) -> Result<()> {
        let first_code = self.vocoded;
        let last = first_code + chunk.rows() - 1;
        let at = self.clock.now;
        let needed = if self.ended {
            policy_frame(last, self.k, self.frames)
        } else {
            last.saturating_add(self.k)
        };
        if needed >= self.frames || at < arrival(needed, self.cfg.frame_duration) {
            return Err(Error::contract(format!(
                "code {last} emitted at {at}s, before input frame {needed} arrived"
            )));
        }
        self.events.push(Event::Emit {
            chunk: self.chunks.len(),
            first_code,
            codes: chunk.rows(),
            at,
        });
        self.vocoded += chunk.rows();
        self.chunks.push(chunk.clone());
        Ok(())
    }

    /// Latency report of a finished session.
    pub fn report(&self) -> Result<LatencyReport> {
        if !self.ended {
            return Err(Error::contract("session has not finished"));
        }
        measure_latency(&self.events, self.cfg.frame_duration, count_params_flops(self.bundle))
    }

    pub fn into_outcome(self) -> Result<StreamOutcome> {
        let report = self.report()?;
        Ok(StreamOutcome {
            k: self.k,
            codes: self.codes,
            chunks: self.chunks,
            tokens: self.transducer.tokens().to_vec(),
            events: self.events,
            report,
        })
    }
}

/// Stream every row of `x` through a fresh session.
pub fn run_streaming(bundle: &ModelBundle, x: &Tensor, k: usize, cfg: &PipelineConfig) -> Result<StreamOutcome> {
    let mut session = StreamSession::new(bundle, k, cfg)?;
    for i in 0..x.rows() {
        session.push_frame(x.row(i))?;
    }
    session.finish()?;
    session.into_outcome()
}

/// The same computation on whole tensors: offline front end, graph decoder
/// decoded one code at a time, then chunked lookup.
pub fn offline_decode(bundle: &ModelBundle, x: &Tensor, k: usize, chunk_size: usize) -> Result<(Vec<usize>, Vec<Tensor>)> {
    let fe = bundle.front_end(x)?;
    let codes = bundle.waitk.decode_offline(&bundle.set, &fe.h_apt, k)?;
    let chunks = chunk_vocode(&bundle.codebook, &codes, chunk_size)?;
    Ok((codes, chunks))
}

#[cfg(test)]
mod tests;
