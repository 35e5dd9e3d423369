//! Per-step compute measurement across chunk configurations.

use std::fmt::Write;
use std::sync::Arc;

use ndarray::ArrayView2;

use crate::attention::TscaConfig;
use crate::convolution::ConvMode;
use crate::encoder::Encoder;
use crate::error::Result;
use crate::real::Real;
use crate::streaming::{run_stream, ComputeClock, StreamSession};

pub const CSV_HEADER: &str = "c,r,window,steps,mean_ms,rtf";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub c: usize,
    pub r: usize,
    /// Key slots per step, `l_att + c + r`.
    pub window: usize,
    /// Steps per stream.
    pub steps: usize,
    pub mean_ms: f64,
    pub rtf: f64,
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6}",
            self.c, self.r, self.window, self.steps, self.mean_ms, self.rtf
        )
    }

    pub fn parse_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(Self {
            c: f[0].parse().ok()?,
            r: f[1].parse().ok()?,
            window: f[2].parse().ok()?,
            steps: f[3].parse().ok()?,
            mean_ms: f[4].parse().ok()?,
            rtf: f[5].parse().ok()?,
        })
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

/// Streams `frames` `repeat` times with chunk geometry `(c, r, l_att)` and
/// averages the per-step compute reported by the clocks.
#[allow(clippy::too_many_arguments)]
pub fn bench_config<T: Real>(
    enc: &Arc<Encoder<T>>,
    c: usize,
    r: usize,
    l_att: usize,
    mode: ConvMode,
    frames: ArrayView2<f64>,
    frame_ms: f64,
    repeat: usize,
    clock: &dyn Fn() -> Box<dyn ComputeClock>,
) -> Result<BenchRow> {
    let tsca = TscaConfig::new(c, r, l_att)?;
    let template = enc.stream(tsca, mode)?;
    let mut compute = Vec::new();
    let mut steps = 0;
    for _ in 0..repeat.max(1) {
        let mut s = StreamSession::open(template.fresh(), frame_ms, clock())?;
        run_stream(&mut s, frames)?;
        steps = s.steps();
        compute.extend(s.records().iter().map(|r| r.compute_ms));
    }
    let mean_ms = if compute.is_empty() {
        0.0
    } else {
        compute.iter().sum::<f64>() / compute.len() as f64
    };
    Ok(BenchRow {
        c,
        r,
        window: tsca.key_slots(),
        steps,
        mean_ms,
        rtf: mean_ms / (c as f64 * frame_ms),
    })
}
