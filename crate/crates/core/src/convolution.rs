//! Dynamic chunk depthwise convolution with lookahead, plus the stride-4
//! sub-sampling front end.
//!
//! A convolution layout gives every frame an exclusive right bound: taps past
//! the bound read zero. Left taps always reach `l_conv` frames back (across
//! chunk boundaries through the cached left tail).

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::ChunkPlan;
use crate::real::Real;

/// Right-context handling of the convolution inside a decoding chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvMode {
    /// Decoding chunk of `c`: no convolution lookahead past the chunk.
    #[default]
    ChunkC,
    /// Decoding chunk of `c + r_min`: lookahead of `min(l_conv, r)` frames.
    ChunkCPlusR,
}

impl ConvMode {
    /// Frames of lookahead past the chunk end.
    pub fn lookahead(self, r: usize, l_conv: usize) -> usize {
        match self {
            ConvMode::ChunkC => 0,
            ConvMode::ChunkCPlusR => r.min(l_conv),
        }
    }
}

impl std::str::FromStr for ConvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c" | "chunk_c" | "chunked_c" => Ok(ConvMode::ChunkC),
            "c+r" | "chunk_c_plus_r" | "chunked_c_plus_r" => Ok(ConvMode::ChunkCPlusR),
            other => Err(Error::InvalidConfig(format!("unknown conv mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for ConvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConvMode::ChunkC => "c",
            ConvMode::ChunkCPlusR => "c+r",
        })
    }
}

/// One convolution segment: input frames `[start, start + len)` produce
/// outputs for `valid`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub valid: Range<usize>,
}

/// Unclipped segment length `l_conv + c + min(l_conv, r)`.
pub fn nominal_segment_len(c: usize, r: usize, l_conv: usize) -> usize {
    l_conv + c + r.min(l_conv)
}

/// Segments of length `l_conv + c + r_min` every `c` frames, clipped to
/// `[0, total)`.
pub fn split_lookahead(total: usize, c: usize, r: usize, l_conv: usize) -> Vec<Segment> {
    assert!(c >= 1, "chunk size must be >= 1");
    let r_min = r.min(l_conv);
    (0..total)
        .step_by(c)
        .map(|cs| {
            let start = cs.saturating_sub(l_conv);
            let end = (cs + c + r_min).min(total);
            Segment {
                start,
                len: end - start,
                valid: cs..(cs + c).min(total),
            }
        })
        .collect()
}

/// Per-frame receptive bounds derived from a segment split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayout {
    pub segments: Vec<Segment>,
    bounds: Vec<usize>,
}

impl ConvLayout {
    pub fn new(total: usize, c: usize, r: usize, l_conv: usize, mode: ConvMode) -> Self {
        let segments = split_lookahead(total, c, mode.lookahead(r, l_conv), l_conv);
        Self::from_segments(total, segments)
    }

    fn from_segments(total: usize, segments: Vec<Segment>) -> Self {
        let mut bounds = vec![0; total];
        for seg in &segments {
            for b in &mut bounds[seg.valid.clone()] {
                *b = seg.start + seg.len;
            }
        }
        Self { segments, bounds }
    }

    /// Layout for a dynamic right-context plan: selected chunks get
    /// `min(l_conv, r)` frames of lookahead, others stop at the chunk end.
    pub fn from_drc(plan: &ChunkPlan, l_conv: usize) -> Self {
        let r_min = plan.right.min(l_conv);
        let segments = plan
            .intervals
            .iter()
            .map(|iv| {
                let la = if iv.extended { r_min } else { 0 };
                let start = iv.start.saturating_sub(l_conv);
                let end = (iv.start + plan.chunk + la).min(plan.size);
                Segment {
                    start,
                    len: end - start,
                    valid: iv.start..(iv.start + plan.chunk).min(plan.size),
                }
            })
            .collect();
        Self::from_segments(plan.size, segments)
    }

    /// Single segment covering everything with unrestricted lookahead.
    pub fn full(total: usize) -> Self {
        Self {
            segments: vec![Segment {
                start: 0,
                len: total,
                valid: 0..total,
            }],
            bounds: vec![total; total],
        }
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    /// Exclusive right bound of frame `m`'s receptive window.
    pub fn bound(&self, m: usize) -> usize {
        self.bounds[m]
    }
}

/// Depthwise kernel: one `K`-tap filter per channel, plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseKernel<T> {
    /// `channels × K`; tap `k` applies to offset `k - l_conv`.
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> DepthwiseKernel<T> {
    pub fn new(weights: Array2<T>, bias: Array1<T>) -> Result<Self> {
        if weights.ncols().is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel width {} must be odd",
                weights.ncols()
            )));
        }
        if bias.len() != weights.nrows() {
            return Err(Error::ShapeMismatch(
                "bias length differs from channel count".into(),
            ));
        }
        Ok(Self { weights, bias })
    }

    pub fn identity(channels: usize, width: usize) -> Self {
        let mut weights = Array2::zeros((channels, width));
        weights.column_mut(width / 2).fill(T::one());
        Self {
            weights,
            bias: Array1::zeros(channels),
        }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        Self {
            weights: Array2::from_shape_fn((channels, width), |_| {
                T::from_f64(rng.random_range(-bound..bound))
            }),
            bias: Array1::from_shape_fn(channels, |_| T::from_f64(rng.random_range(-bound..bound))),
        }
    }

    pub fn channels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn l_conv(&self) -> usize {
        self.width() / 2
    }
}

/// Offline evaluation: every frame gathers `[m - l_conv, bound(m))`.
pub fn dcc_forward<T: Real>(
    x: ArrayView2<T>,
    layout: &ConvLayout,
    kernel: &DepthwiseKernel<T>,
) -> Result<Array2<T>> {
    let (t, ch) = x.dim();
    if layout.len() != t {
        return Err(Error::ShapeMismatch(format!(
            "layout covers {} frames, input has {t}",
            layout.len()
        )));
    }
    if kernel.channels() != ch {
        return Err(Error::ShapeMismatch(format!(
            "kernel has {} channels, input {ch}",
            kernel.channels()
        )));
    }
    let l = kernel.l_conv() as i64;
    let mut y = Array2::zeros((t, ch));
    for m in 0..t {
        let hi = layout.bound(m) as i64;
        let mut row = kernel.bias.clone();
        for delta in -l..=l {
            let n = m as i64 + delta;
            if n < 0 || n >= hi {
                continue;
            }
            let w = kernel.weights.column((delta + l) as usize);
            row.zip_mut_with(&(&w * &x.row(n as usize)), |a, &b| *a += b);
        }
        y.row_mut(m).assign(&row);
    }
    Ok(y)
}

/// Left context carried between convolution segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvCache<T> {
    /// Last `l_conv` frames before `position + l_conv`; zero before the
    /// stream start.
    pub left_tail: Array2<T>,
    /// Global frame of the first tail row.
    pub position: i64,
}

impl<T: Real> ConvCache<T> {
    pub fn new(l_conv: usize, channels: usize, first_chunk_start: i64) -> Self {
        Self {
            left_tail: Array2::zeros((l_conv, channels)),
            position: first_chunk_start - l_conv as i64,
        }
    }

    /// Advances past `consumed` rows of `window` (which starts right after the
    /// tail), keeping the last `l_conv` frames.
    pub(crate) fn advance(&mut self, window: ArrayView2<T>, consumed: usize) {
        let l = self.left_tail.nrows();
        let joined = ndarray::concatenate(
            Axis(0),
            &[self.left_tail.view(), window.slice(s![..consumed, ..])],
        )
        .expect("same width");
        self.left_tail = joined.slice(s![joined.nrows() - l.., ..]).to_owned();
        self.position += consumed as i64;
    }
}

/// Convolves `window` whose rows follow `tail` directly. Row `m` uses taps up
/// to exclusive bound `bound(m)` (window-relative); taps at global frames
/// below zero read zero.
pub(crate) fn conv_window<T: Real>(
    tail: &ConvCache<T>,
    window: ArrayView2<T>,
    kernel: &DepthwiseKernel<T>,
    bound: impl Fn(usize) -> usize,
) -> Array2<T> {
    let l = tail.left_tail.nrows();
    let (rows, ch) = window.dim();
    let window_start = tail.position + l as i64;
    let mut y = Array2::zeros((rows, ch));
    for m in 0..rows {
        let hi = bound(m) as i64;
        let mut out = kernel.bias.clone();
        for (k, w) in kernel.weights.axis_iter(Axis(1)).enumerate() {
            let rel = m as i64 + k as i64 - l as i64;
            if rel >= hi || window_start + rel < 0 {
                continue;
            }
            let src = if rel < 0 {
                tail.left_tail.row((l as i64 + rel) as usize)
            } else {
                window.row(rel as usize)
            };
            out.zip_mut_with(&(&w * &src), |a, &b| *a += b);
        }
        y.row_mut(m).assign(&out);
    }
    y
}

/// Segment-at-a-time streaming evaluator. Frames are pushed as they arrive;
/// a chunk is convolved once its lookahead frames are in.
#[derive(Debug, Clone)]
pub struct DccStream<T> {
    kernel: DepthwiseKernel<T>,
    c: usize,
    lookahead: usize,
    cache: ConvCache<T>,
    pending: Vec<Array1<T>>,
}

impl<T: Real> DccStream<T> {
    pub fn new(kernel: DepthwiseKernel<T>, c: usize, r: usize, mode: ConvMode) -> Self {
        let l = kernel.l_conv();
        let ch = kernel.channels();
        Self {
            lookahead: mode.lookahead(r, l),
            kernel,
            c,
            cache: ConvCache::new(l, ch, 0),
            pending: Vec::new(),
        }
    }

    pub fn cache(&self) -> &ConvCache<T> {
        &self.cache
    }

    fn run_segment(&mut self, available: usize) -> Array2<T> {
        let ch = self.kernel.channels();
        let rows = available.min(self.c + self.lookahead);
        let mut window = Array2::zeros((rows, ch));
        for (i, f) in self.pending.iter().take(rows).enumerate() {
            window.row_mut(i).assign(f);
        }
        let emit = self.c.min(rows);
        let y = conv_window(&self.cache, window.view(), &self.kernel, |_| rows);
        self.cache.advance(window.view(), emit);
        self.pending.drain(..emit);
        y.slice(s![..emit, ..]).to_owned()
    }

    /// Feeds frames; returns outputs for every chunk now complete.
    pub fn push(&mut self, frames: ArrayView2<T>) -> Array2<T> {
        self.pending
            .extend(frames.outer_iter().map(|r| r.to_owned()));
        let mut out = Array2::zeros((0, self.kernel.channels()));
        while self.pending.len() >= self.c + self.lookahead {
            let y = self.run_segment(self.pending.len());
            out.append(Axis(0), y.view()).expect("same width");
        }
        out
    }

    /// Flushes the remaining frames at end of stream.
    pub fn finish(&mut self) -> Array2<T> {
        let mut out = Array2::zeros((0, self.kernel.channels()));
        while !self.pending.is_empty() {
            let y = self.run_segment(self.pending.len());
            out.append(Axis(0), y.view()).expect("same width");
        }
        out
    }
}

/// Input rows of one convolution segment after right-context masking.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentWindow<T> {
    pub start: usize,
    pub chunk_end: usize,
    pub data: Array2<T>,
}

/// Cuts `x` into per-chunk convolution windows
/// `[start - l_conv, start + c + min(l_conv, r))`; frames past the chunk end
/// are zeroed for chunks the plan did not extend.
pub fn masked_right_context<T: Real>(
    x: ArrayView2<T>,
    plan: &ChunkPlan,
    l_conv: usize,
) -> Vec<SegmentWindow<T>> {
    let r_min = plan.right.min(l_conv);
    plan.intervals
        .iter()
        .map(|iv| {
            let start = iv.start.saturating_sub(l_conv);
            let end = (iv.start + plan.chunk + r_min).min(plan.size);
            let chunk_end = (iv.start + plan.chunk).min(plan.size);
            let mut data = x.slice(s![start..end, ..]).to_owned();
            if !iv.extended {
                data.slice_mut(s![chunk_end - start.., ..]).fill(T::zero());
            }
            SegmentWindow {
                start,
                chunk_end,
                data,
            }
        })
        .collect()
}

/// Two stride-2, 3-tap temporal convolutions with ReLU. The first frame is
/// replicated once on the left of each stage, so `T` input frames give
/// `floor(T / 4)` outputs and output `k` starts at input frame `4k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsampler<T> {
    /// Per-tap `out × in` matrices of the first stage.
    pub stage1: [Array2<T>; 3],
    pub bias1: Array1<T>,
    pub stage2: [Array2<T>; 3],
    pub bias2: Array1<T>,
}

/// Input frames per sub-sampled frame.
pub const SUBSAMPLE_FACTOR: usize = 4;

impl<T: Real> Subsampler<T> {
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_model: usize, rng: &mut R) -> Self {
        let b1 = 1.0 / ((3 * d_in) as f64).sqrt();
        let b2 = 1.0 / ((3 * d_model) as f64).sqrt();
        let mut m = |rows, cols, b: f64| {
            Array2::from_shape_fn((rows, cols), |_| T::from_f64(rng.random_range(-b..b)))
        };
        let stage1 = [
            m(d_model, d_in, b1),
            m(d_model, d_in, b1),
            m(d_model, d_in, b1),
        ];
        let stage2 = [
            m(d_model, d_model, b2),
            m(d_model, d_model, b2),
            m(d_model, d_model, b2),
        ];
        let bias1 = Array1::from_shape_fn(d_model, |_| T::from_f64(rng.random_range(-b1..b1)));
        let bias2 = Array1::from_shape_fn(d_model, |_| T::from_f64(rng.random_range(-b2..b2)));
        Self {
            stage1,
            bias1,
            stage2,
            bias2,
        }
    }

    pub fn d_in(&self) -> usize {
        self.stage1[0].ncols()
    }

    pub fn d_model(&self) -> usize {
        self.stage1[0].nrows()
    }

    fn stage(x: ArrayView2<T>, taps: &[Array2<T>; 3], bias: &Array1<T>) -> Array2<T> {
        let n_out = x.nrows() / 2;
        let mut y = Array2::zeros((n_out, bias.len()));
        for t in 0..n_out {
            let mut acc = bias.clone();
            for (k, w) in taps.iter().enumerate() {
                let src = (2 * t + k).saturating_sub(1);
                acc += &w.dot(&x.row(src));
            }
            acc.mapv_inplace(|v| v.max(T::zero()));
            y.row_mut(t).assign(&acc);
        }
        y
    }

    /// Offline sub-sampling of a whole feature matrix.
    pub fn forward(&self, features: ArrayView2<T>) -> Result<Array2<T>> {
        if features.nrows() < SUBSAMPLE_FACTOR {
            return Err(Error::InputTooShort {
                got: features.nrows(),
                need: SUBSAMPLE_FACTOR,
            });
        }
        if features.ncols() != self.d_in() {
            return Err(Error::ShapeMismatch(format!(
                "features have {} dims, sub-sampler expects {}",
                features.ncols(),
                self.d_in()
            )));
        }
        let h = Self::stage(features, &self.stage1, &self.bias1);
        Ok(Self::stage(h.view(), &self.stage2, &self.bias2))
    }
}

/// Incremental sub-sampler: output `k` is emitted once input frame `4k + 3`
/// has arrived.
#[derive(Debug, Clone)]
pub struct SubsampleStream<T> {
    raw: Vec<Array1<T>>,
    mid: Vec<Array1<T>>,
    emitted: usize,
}

impl<T: Real> Default for SubsampleStream<T> {
    fn default() -> Self {
        Self {
            raw: Vec::new(),
            mid: Vec::new(),
            emitted: 0,
        }
    }
}

impl<T: Real> SubsampleStream<T> {
    pub fn push(&mut self, sub: &Subsampler<T>, features: ArrayView2<T>) -> Array2<T> {
        self.raw.extend(features.outer_iter().map(|r| r.to_owned()));
        let tap = |buf: &[Array1<T>], t: usize, taps: &[Array2<T>; 3], bias: &Array1<T>| {
            let mut acc = bias.clone();
            for (k, w) in taps.iter().enumerate() {
                acc += &w.dot(&buf[(2 * t + k).saturating_sub(1)]);
            }
            acc.mapv_inplace(|v| v.max(T::zero()));
            acc
        };
        while 2 * self.mid.len() + 1 < self.raw.len() {
            let t = self.mid.len();
            let row = tap(&self.raw, t, &sub.stage1, &sub.bias1);
            self.mid.push(row);
        }
        let mut out = Array2::zeros((0, sub.d_model()));
        while 2 * self.emitted + 1 < self.mid.len() {
            let row = tap(&self.mid, self.emitted, &sub.stage2, &sub.bias2);
            out.push_row(row.view()).expect("same width");
            self.emitted += 1;
        }
        out
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::drc_plan;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_x(t: usize, ch: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, ch), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct per-frame window sum, written without layouts.
    fn windowed_conv(
        x: &Array2<f64>,
        k: &DepthwiseKernel<f64>,
        lo_hi: impl Fn(usize) -> (i64, i64),
    ) -> Array2<f64> {
        let (t, ch) = x.dim();
        let l = k.l_conv() as i64;
        let mut y = Array2::zeros((t, ch));
        for m in 0..t {
            let (lo, hi) = lo_hi(m);
            for c in 0..ch {
                let mut acc = k.bias[c];
                for d in -l..=l {
                    let n = m as i64 + d;
                    if n >= lo && n < hi && n >= 0 && n < t as i64 {
                        acc += k.weights[[c, (d + l) as usize]] * x[[n as usize, c]];
                    }
                }
                y[[m, c]] = acc;
            }
        }
        y
    }

    #[test]
    fn split_matches_reported_sizes() {
        let segs = split_lookahead(30, 10, 6, 7);
        assert_eq!(nominal_segment_len(10, 6, 7), 23);
        assert_eq!(segs.len(), 3);
        assert_eq!(
            segs[1],
            Segment {
                start: 3,
                len: 23,
                valid: 10..20
            }
        );
        assert_eq!(segs[0].start, 0);
        assert_eq!(segs[2].valid, 20..30);
        let strides: Vec<usize> = segs.iter().map(|s| s.valid.start).collect();
        assert_eq!(strides, vec![0, 10, 20]);
    }

    #[test]
    fn split_without_right_context() {
        let segs = split_lookahead(30, 10, 0, 7);
        assert_eq!(
            segs[1],
            Segment {
                start: 3,
                len: 17,
                valid: 10..20
            }
        );
    }

    #[test]
    fn lookahead_clamped_by_kernel_reach() {
        let segs = split_lookahead(30, 10, 6, 1);
        assert_eq!(
            segs[1],
            Segment {
                start: 9,
                len: 12,
                valid: 10..20
            }
        );
        assert_eq!(ConvMode::ChunkCPlusR.lookahead(6, 1), 1);
        assert_eq!(ConvMode::ChunkC.lookahead(6, 7), 0);
    }

    #[test]
    fn identity_kernel_is_fixed_point() {
        let x = rand_x(23, 3, 1);
        for mode in [ConvMode::ChunkC, ConvMode::ChunkCPlusR] {
            let layout = ConvLayout::new(23, 5, 2, 3, mode);
            let y = dcc_forward(x.view(), &layout, &DepthwiseKernel::identity(3, 7)).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn single_chunk_is_full_convolution() {
        let x = rand_x(12, 2, 2);
        let k = DepthwiseKernel::random(2, 5, &mut ChaCha8Rng::seed_from_u64(3));
        let layout = ConvLayout::new(12, 12, 4, 2, ConvMode::ChunkCPlusR);
        let got = dcc_forward(x.view(), &layout, &k).unwrap();
        let full = dcc_forward(x.view(), &ConvLayout::full(12), &k).unwrap();
        assert_eq!(got, full);
        let expected = windowed_conv(&x, &k, |_| (0, 12));
        assert!((&got - &expected).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn offline_layout_matches_direct_windows() {
        let x = rand_x(37, 4, 4);
        let k = DepthwiseKernel::random(4, 15, &mut ChaCha8Rng::seed_from_u64(5));
        let (c, r, l) = (10, 3, 7);
        let got = dcc_forward(
            x.view(),
            &ConvLayout::new(37, c, r, l, ConvMode::ChunkCPlusR),
            &k,
        )
        .unwrap();
        let expected = windowed_conv(&x, &k, |m| (0, ((m / c) * c + c + r) as i64));
        assert!((&got - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn streaming_matches_offline_layout() {
        for (width, r) in [(3, 6), (15, 6), (15, 3), (3, 0), (15, 9)] {
            for mode in [ConvMode::ChunkC, ConvMode::ChunkCPlusR] {
                let x = rand_x(47, 3, width as u64 + r as u64);
                let k = DepthwiseKernel::random(3, width, &mut ChaCha8Rng::seed_from_u64(9));
                let c = 10;
                let offline =
                    dcc_forward(x.view(), &ConvLayout::new(47, c, r, width / 2, mode), &k).unwrap();
                let mut stream = DccStream::new(k.clone(), c, r, mode);
                let mut out = Array2::zeros((0, 3));
                let mut pos = 0;
                for piece in [7usize, 13, 1, 11, 15] {
                    let y = stream.push(x.slice(s![pos..pos + piece, ..]));
                    out.append(Axis(0), y.view()).unwrap();
                    pos += piece;
                }
                out.append(Axis(0), stream.finish().view()).unwrap();
                assert_eq!(out.nrows(), 47);
                let diff = (&out - &offline).iter().fold(0.0f64, |m, d| m.max(d.abs()));
                assert!(diff <= 1e-12, "width {width} r {r} {mode:?}: {diff}");
            }
        }
    }

    #[test]
    fn outputs_insensitive_past_segment_lookahead() {
        let x = rand_x(40, 2, 8);
        let k = DepthwiseKernel::random(2, 7, &mut ChaCha8Rng::seed_from_u64(1));
        let layout = ConvLayout::new(40, 8, 2, 3, ConvMode::ChunkCPlusR);
        let base = dcc_forward(x.view(), &layout, &k).unwrap();
        for t in 0..40 {
            let mut xp = x.clone();
            xp[[t, 0]] += 10.0;
            xp[[t, 1]] -= 3.0;
            let y = dcc_forward(xp.view(), &layout, &k).unwrap();
            for m in 0..40 {
                let legal = t + 3 >= m && t < layout.bound(m);
                if !legal {
                    assert_eq!(y.row(m), base.row(m), "frame {m} moved when perturbing {t}");
                }
            }
        }
    }

    #[test]
    fn masked_windows_follow_selection() {
        let x = rand_x(30, 2, 3);
        let l_conv = 3;
        for p in [0.0, 1.0, 0.5] {
            let plan = drc_plan(30, 4, 6, 2, p, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
            let wins = masked_right_context(x.view(), &plan, l_conv);
            assert_eq!(wins.len(), plan.intervals.len());
            // interval walk
            for (iv, w) in plan.intervals.iter().zip(&wins) {
                let start = iv.start.saturating_sub(l_conv);
                assert_eq!(w.start, start);
                for (i, row) in w.data.outer_iter().enumerate() {
                    let g = start + i;
                    let visible = g < iv.start + 6 || iv.extended;
                    if visible {
                        assert_eq!(row, x.row(g));
                    } else {
                        assert!(row.iter().all(|&v| v == 0.0));
                    }
                }
            }
            if p == 1.0 {
                assert!(wins
                    .iter()
                    .all(|w| w.data == x.slice(s![w.start..w.start + w.data.nrows(), ..])));
            }
        }
    }

    #[test]
    fn drc_layout_bounds() {
        let plan = drc_plan(20, 4, 5, 2, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let layout = ConvLayout::from_drc(&plan, 3);
        for m in 0..20 {
            let iv = plan.chunk_of(m);
            let la = if iv.extended { 2 } else { 0 };
            assert_eq!(layout.bound(m), (iv.start + 5 + la).min(20));
        }
    }

    #[test]
    fn subsample_counts_and_constant_input() {
        let sub = Subsampler::<f64>::random(5, 8, &mut ChaCha8Rng::seed_from_u64(2));
        let x = rand_x(16, 5, 1);
        assert_eq!(sub.forward(x.view()).unwrap().nrows(), 4);
        assert_eq!(sub.forward(rand_x(19, 5, 1).view()).unwrap().nrows(), 4);
        assert!(matches!(
            sub.forward(rand_x(3, 5, 1).view()),
            Err(Error::InputTooShort { .. })
        ));

        let row = rand_x(1, 5, 7);
        let constant = Array2::from_shape_fn((24, 5), |(_, j)| row[[0, j]]);
        let y = sub.forward(constant.view()).unwrap();
        for t in 1..y.nrows() {
            assert_eq!(y.row(t), y.row(0));
        }
    }

    #[test]
    fn subsample_stream_matches_offline() {
        let sub = Subsampler::<f64>::random(4, 6, &mut ChaCha8Rng::seed_from_u64(5));
        let x = rand_x(43, 4, 3);
        let offline = sub.forward(x.view()).unwrap();
        let mut st = SubsampleStream::default();
        let mut out = Array2::zeros((0, 6));
        let mut pos = 0;
        for piece in [1usize, 2, 5, 4, 9, 22] {
            out.append(
                Axis(0),
                st.push(&sub, x.slice(s![pos..pos + piece, ..])).view(),
            )
            .unwrap();
            pos += piece;
            assert_eq!(st.emitted(), pos / SUBSAMPLE_FACTOR);
        }
        assert_eq!(out, offline);
    }
}
