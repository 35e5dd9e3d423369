//! Streaming sessions: offset bookkeeping, incremental CTC with provisional
//! and revised emissions, latency accounting and lockstep batches.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;

use crate::encoder::{argmax_path, ctc_collapse, EncoderStream, StepOutput, BLANK};
use crate::error::{Error, Result};
use crate::real::Real;

/// Anything that can run one time-shifted step. Frames and logits cross the
/// boundary as `f64`.
pub trait StepModel: Send {
    fn chunk(&self) -> usize;
    fn right(&self) -> usize;
    fn left(&self) -> usize;
    /// Width of an input frame.
    fn input_width(&self) -> usize;
    fn step(&mut self, chunk: ArrayView2<f64>, valid: usize, last: bool)
        -> Result<StepOutput<f64>>;
}

impl<T: Real> StepModel for EncoderStream<T> {
    fn chunk(&self) -> usize {
        self.tsca().c
    }

    fn right(&self) -> usize {
        self.tsca().r
    }

    fn left(&self) -> usize {
        self.tsca().l_att
    }

    fn input_width(&self) -> usize {
        self.encoder().config().d_model
    }

    fn step(
        &mut self,
        chunk: ArrayView2<f64>,
        valid: usize,
        last: bool,
    ) -> Result<StepOutput<f64>> {
        let out = self.forward_step(chunk.mapv(T::from_f64).view(), valid, last)?;
        Ok(StepOutput {
            offset: out.offset,
            final_start: out.final_start,
            finals: out.finals.mapv(Real::to_f64),
            provisional: out.provisional.mapv(Real::to_f64),
        })
    }
}

/// Source of per-step compute durations in milliseconds.
pub trait ComputeClock: Send {
    fn begin(&mut self);
    fn end(&mut self) -> f64;
}

/// Wall-clock durations.
#[derive(Debug, Default)]
pub struct SystemClock {
    started: Option<Instant>,
}

impl ComputeClock for SystemClock {
    fn begin(&mut self) {
        self.started = Some(Instant::now());
    }

    fn end(&mut self) -> f64 {
        self.started
            .take()
            .map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3)
    }
}

/// Every step costs the same fixed number of milliseconds.
#[derive(Debug, Clone, Copy)]
pub struct FixedCost(pub f64);

impl ComputeClock for FixedCost {
    fn begin(&mut self) {}

    fn end(&mut self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Final,
    Provisional,
    Revised,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Final => "final",
            Status::Provisional => "provisional",
            Status::Revised => "revised",
        })
    }
}

impl FromStr for Status {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Status::Final),
            "provisional" => Ok(Status::Provisional),
            "revised" => Ok(Status::Revised),
            other => Err(Error::Format(format!("unknown event status '{other}'"))),
        }
    }
}

/// One emission covering global sub-sampled frames `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionEvent {
    pub step: usize,
    pub status: Status,
    pub start: i64,
    pub end: i64,
    pub wall_ms: f64,
    pub tokens: Vec<u32>,
}

impl EmissionEvent {
    pub fn is_final(&self) -> bool {
        self.status != Status::Provisional
    }

    /// `step<TAB>status<TAB>start<TAB>end<TAB>wall_ms<TAB>tokens`.
    pub fn to_log_line(&self) -> String {
        let tokens: Vec<String> = self.tokens.iter().map(u32::to_string).collect();
        format!(
            "{}\t{}\t{}\t{}\t{:.3}\t{}",
            self.step,
            self.status,
            self.start,
            self.end,
            self.wall_ms,
            tokens.join(" ")
        )
    }

    pub fn parse_log_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!(
                "expected 6 fields, got {}: {line:?}",
                f.len()
            )));
        }
        let num = |s: &str| {
            s.parse::<i64>()
                .map_err(|e| Error::Format(format!("{s:?}: {e}")))
        };
        Ok(Self {
            step: num(f[0])? as usize,
            status: f[1].parse()?,
            start: num(f[2])?,
            end: num(f[3])?,
            wall_ms: f[4]
                .parse()
                .map_err(|e| Error::Format(format!("{:?}: {e}", f[4])))?,
            tokens: f[5]
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| Error::Format(format!("{t:?}: {e}"))))
                .collect::<Result<_>>()?,
        })
    }
}

pub fn format_event_log(events: &[EmissionEvent]) -> String {
    events.iter().map(|e| e.to_log_line() + "\n").collect()
}

/// Key range `[lo, hi]` under which a frame's final output was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyWindow {
    pub lo: i64,
    pub hi: i64,
}

/// Schedule and timing of one executed step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub offset: i64,
    /// First global frame past the real input seen by this step.
    pub valid_end: i64,
    pub last: bool,
    pub available_ms: f64,
    pub start_ms: f64,
    pub end_ms: f64,
    pub compute_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct ProvisionalSpan {
    start: i64,
    end: i64,
    tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub upl_per_frame: Vec<f64>,
    pub upl_mean: f64,
    pub upl_max: f64,
    pub rtf: f64,
    pub per_step_compute: Vec<f64>,
}

impl LatencyReport {
    pub fn steps(&self) -> usize {
        self.per_step_compute.len()
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "upl_mean_ms={}\nupl_max_ms={}\nrtf={}\nsteps={}\n",
            self.upl_mean,
            self.upl_max,
            self.rtf,
            self.steps()
        )
    }
}

/// A streaming session over one utterance.
pub struct StreamSession<M> {
    model: M,
    clock: Box<dyn ComputeClock>,
    frame_ms: f64,
    offset: i64,
    pushed: usize,
    closed: bool,
    events: Vec<EmissionEvent>,
    carry: u32,
    committed: Vec<u32>,
    provisional: Option<ProvisionalSpan>,
    realized: Vec<KeyWindow>,
    final_ms: Vec<f64>,
    records: Vec<StepRecord>,
}

impl<M: StepModel> StreamSession<M> {
    /// Opens a session. Sub-sampled frame `g` is taken to arrive at
    /// `g * frame_ms`.
    pub fn open(model: M, frame_ms: f64, clock: Box<dyn ComputeClock>) -> Result<Self> {
        let (c, r) = (model.chunk(), model.right());
        if c == 0 || r >= c {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= r < c, got c={c} r={r}"
            )));
        }
        if frame_ms.is_nan() || frame_ms <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "frame_ms must be positive, got {frame_ms}"
            )));
        }
        Ok(Self {
            offset: -(r as i64),
            model,
            clock,
            frame_ms,
            pushed: 0,
            closed: false,
            events: Vec::new(),
            carry: BLANK,
            committed: Vec::new(),
            provisional: None,
            realized: Vec::new(),
            final_ms: Vec::new(),
            records: Vec::new(),
        })
    }

    pub fn chunk(&self) -> usize {
        self.model.chunk()
    }

    pub fn right(&self) -> usize {
        self.model.right()
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut M {
        &mut self.model
    }

    pub fn events(&self) -> &[EmissionEvent] {
        &self.events
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// Tokens that can no longer change.
    pub fn committed(&self) -> &[u32] {
        &self.committed
    }

    /// Tokens of the current provisional span.
    pub fn provisional(&self) -> &[u32] {
        self.provisional.as_ref().map_or(&[], |p| &p.tokens)
    }

    /// Committed followed by provisional tokens.
    pub fn display(&self) -> Vec<u32> {
        let mut d = self.committed.clone();
        d.extend_from_slice(self.provisional());
        d
    }

    pub fn push_chunk(&mut self, frames: ArrayView2<f64>) -> Result<Vec<EmissionEvent>> {
        if self.closed {
            return Err(Error::SessionClosed);
        }
        let c = self.chunk();
        if frames.nrows() != c {
            return Err(Error::ChunkSizeMismatch {
                expected: c,
                got: frames.nrows(),
            });
        }
        self.pushed += 1;
        let available = (self.pushed * c) as f64 * self.frame_ms;
        self.run_step(frames, c, false, available)
    }

    /// Ends the stream with `tail` (`0..=c` frames). Runs one last step when
    /// there are unseen frames or pending provisional ones.
    pub fn finalize(&mut self, tail: ArrayView2<f64>) -> Result<Vec<EmissionEvent>> {
        if self.closed {
            return Err(Error::SessionClosed);
        }
        let (c, r) = (self.chunk(), self.right());
        let t = tail.nrows();
        if t > c {
            return Err(Error::ChunkSizeMismatch {
                expected: c,
                got: t,
            });
        }
        let events = if t > 0 || (self.pushed > 0 && r > 0) {
            let mut chunk = Array2::zeros((c, self.model.input_width()));
            if t > 0 {
                chunk.slice_mut(s![..t, ..]).assign(&tail);
            }
            let available = (self.pushed * c + t) as f64 * self.frame_ms;
            self.run_step(chunk.view(), t, true, available)?
        } else {
            Vec::new()
        };
        self.provisional = None;
        self.closed = true;
        Ok(events)
    }

    fn run_step(
        &mut self,
        chunk: ArrayView2<f64>,
        valid: usize,
        last: bool,
        available: f64,
    ) -> Result<Vec<EmissionEvent>> {
        let (c, r, l_att) = (self.chunk(), self.right(), self.model.left());
        let o = self.offset;
        self.clock.begin();
        let out = self.model.step(chunk, valid, last)?;
        let compute = self.clock.end();
        if out.offset != o {
            return Err(Error::CacheDesync {
                expected: o,
                actual: out.offset,
            });
        }
        let start = self
            .records
            .last()
            .map_or(available, |p| p.end_ms.max(available));
        let end = start + compute;
        let step = self.records.len();
        let valid_end = if last {
            o + (r + valid) as i64
        } else {
            o + (c + r) as i64
        };
        self.records.push(StepRecord {
            offset: o,
            valid_end,
            last,
            available_ms: available,
            start_ms: start,
            end_ms: end,
            compute_ms: compute,
        });

        let mut events = Vec::with_capacity(2);
        let final_start = out.final_start;
        let final_end = final_start + out.finals.nrows() as i64;
        if final_start != self.realized.len() as i64 {
            return Err(Error::CacheDesync {
                expected: self.realized.len() as i64,
                actual: final_start,
            });
        }
        let path = argmax_path(out.finals.view());
        let status = match self.provisional.take() {
            Some(p) => {
                let lead = (p.end.min(final_end) - p.start).max(0) as usize;
                let (lead_tokens, _) = ctc_collapse(&path[..lead], self.carry);
                if lead_tokens == p.tokens {
                    Status::Final
                } else {
                    Status::Revised
                }
            }
            None => Status::Final,
        };
        let (tokens, last_label) = ctc_collapse(&path, self.carry);
        self.carry = last_label;
        self.committed.extend_from_slice(&tokens);
        let window = KeyWindow {
            lo: (o - l_att as i64).max(0),
            hi: valid_end - 1,
        };
        for _ in final_start..final_end {
            self.realized.push(window);
            self.final_ms.push(end);
        }
        if final_end > final_start {
            events.push(EmissionEvent {
                step,
                status,
                start: final_start,
                end: final_end,
                wall_ms: end,
                tokens,
            });
        }
        if !last && r > 0 {
            let (tokens, _) = ctc_collapse(&argmax_path(out.provisional.view()), self.carry);
            let span = ProvisionalSpan {
                start: final_end,
                end: final_end + out.provisional.nrows() as i64,
                tokens: tokens.clone(),
            };
            events.push(EmissionEvent {
                step,
                status: Status::Provisional,
                start: span.start,
                end: span.end,
                wall_ms: end,
                tokens,
            });
            self.provisional = Some(span);
        }
        self.offset += c as i64;
        self.events.extend(events.iter().cloned());
        Ok(events)
    }

    /// Per-frame key windows of the final outputs.
    pub fn realized_windows(&self) -> Result<&[KeyWindow]> {
        if !self.closed {
            return Err(Error::SessionOpen);
        }
        Ok(&self.realized)
    }

    pub fn latency_report(&self) -> Result<LatencyReport> {
        if !self.closed {
            return Err(Error::SessionOpen);
        }
        let upl: Vec<f64> = self
            .final_ms
            .iter()
            .enumerate()
            .map(|(g, &t)| t - g as f64 * self.frame_ms)
            .collect();
        let compute: Vec<f64> = self.records.iter().map(|r| r.compute_ms).collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Ok(LatencyReport {
            upl_mean: mean(&upl),
            upl_max: upl.iter().copied().fold(0.0, f64::max),
            rtf: mean(&compute) / (self.chunk() as f64 * self.frame_ms),
            upl_per_frame: upl,
            per_step_compute: compute,
        })
    }
}

/// Streams `frames` through `session` chunk by chunk, then finalizes.
pub fn run_stream<M: StepModel>(
    session: &mut StreamSession<M>,
    frames: ArrayView2<f64>,
) -> Result<Vec<EmissionEvent>> {
    let c = session.chunk();
    let full = frames.nrows() / c;
    let mut events = Vec::new();
    for k in 0..full {
        events.extend(session.push_chunk(frames.slice(s![k * c..(k + 1) * c, ..]))?);
    }
    events.extend(session.finalize(frames.slice(s![full * c.., ..]))?);
    Ok(events)
}

/// Steps every session in lockstep, one chunk per round, in parallel.
/// Sessions whose stream ends finalize in that round; the rest continue.
pub fn run_batch<M: StepModel>(
    sessions: &mut [StreamSession<M>],
    streams: &[ArrayView2<f64>],
) -> Result<Vec<Vec<EmissionEvent>>> {
    if sessions.len() != streams.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} sessions for {} streams",
            sessions.len(),
            streams.len()
        )));
    }
    if let Some(first) = sessions.first() {
        let (c, r) = (first.chunk(), first.right());
        if let Some(bad) = sessions.iter().find(|s| (s.chunk(), s.right()) != (c, r)) {
            return Err(Error::HeterogeneousConfig(format!(
                "(c={c}, r={r}) vs (c={}, r={})",
                bad.chunk(),
                bad.right()
            )));
        }
        let rounds = streams.iter().map(|x| x.nrows() / c).max().unwrap_or(0);
        for k in 0..=rounds {
            sessions
                .par_iter_mut()
                .zip(streams.par_iter())
                .try_for_each(|(s, x)| {
                    let full = x.nrows() / c;
                    if k < full {
                        s.push_chunk(x.slice(s![k * c..(k + 1) * c, ..])).map(drop)
                    } else if k == full {
                        s.finalize(x.slice(s![full * c.., ..])).map(drop)
                    } else {
                        Ok(())
                    }
                })?;
        }
    }
    Ok(sessions.iter().map(|s| s.events().to_vec()).collect())
}

/// Wraps a model and keeps every step output.
#[derive(Debug, Clone)]
pub struct Recorder<M> {
    pub inner: M,
    pub outputs: Vec<StepOutput<f64>>,
}

impl<M> Recorder<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            outputs: Vec::new(),
        }
    }

    /// Final logits of every step, stacked in frame order.
    pub fn final_logits(&self) -> Array2<f64> {
        let cols = self.outputs.first().map_or(0, |o| o.finals.ncols());
        let mut out = Array2::zeros((0, cols));
        for o in &self.outputs {
            out.append(ndarray::Axis(0), o.finals.view())
                .expect("same width");
        }
        out
    }
}

impl<M: StepModel> StepModel for Recorder<M> {
    fn chunk(&self) -> usize {
        self.inner.chunk()
    }

    fn right(&self) -> usize {
        self.inner.right()
    }

    fn left(&self) -> usize {
        self.inner.left()
    }

    fn input_width(&self) -> usize {
        self.inner.input_width()
    }

    fn step(
        &mut self,
        chunk: ArrayView2<f64>,
        valid: usize,
        last: bool,
    ) -> Result<StepOutput<f64>> {
        let out = self.inner.step(chunk, valid, last)?;
        self.outputs.push(out.clone());
        Ok(out)
    }
}

/// Model that replays scripted label paths as one-hot logits; frames are
/// ignored. Each script entry holds the final labels and provisional labels
/// for one step.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    c: usize,
    r: usize,
    l_att: usize,
    vocab: usize,
    offset: i64,
    script: std::collections::VecDeque<(Vec<u32>, Vec<u32>)>,
}

impl ScriptedModel {
    pub fn new(
        c: usize,
        r: usize,
        l_att: usize,
        vocab: usize,
        script: Vec<(Vec<u32>, Vec<u32>)>,
    ) -> Self {
        Self {
            c,
            r,
            l_att,
            vocab,
            offset: -(r as i64),
            script: script.into(),
        }
    }

    fn one_hot(&self, labels: &[u32], rows: usize) -> Array2<f64> {
        let mut m = Array2::zeros((rows, self.vocab));
        for i in 0..rows {
            m[[i, labels.get(i).copied().unwrap_or(BLANK) as usize]] = 1.0;
        }
        m
    }
}

impl StepModel for ScriptedModel {
    fn chunk(&self) -> usize {
        self.c
    }

    fn right(&self) -> usize {
        self.r
    }

    fn left(&self) -> usize {
        self.l_att
    }

    fn input_width(&self) -> usize {
        1
    }

    fn step(
        &mut self,
        _chunk: ArrayView2<f64>,
        valid: usize,
        last: bool,
    ) -> Result<StepOutput<f64>> {
        let (fin, prov) = self.script.pop_front().unwrap_or_default();
        let o = self.offset;
        let skip = (-o).max(0) as usize;
        let final_rows = if last { self.r + valid } else { self.c } - skip;
        let prov_rows = if last { 0 } else { self.r };
        self.offset += self.c as i64;
        Ok(StepOutput {
            offset: o,
            final_start: o.max(0),
            finals: self.one_hot(&fin, final_rows),
            provisional: self.one_hot(&prov, prov_rows),
        })
    }
}
