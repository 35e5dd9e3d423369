//! Brute-force references used to check the optimized paths.
//!
//! Nothing here calls into the attention module's score or softmax code:
//! [`direct_attention`] recomputes everything with plain loops and its own
//! sinusoid table.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionParams, RelPosAttention, RelTable};
use crate::convolution::ConvMode;
use crate::encoder::{Encoder, Geometry};
use crate::error::{Error, Result};
use crate::masking::{drc_plan, AttnMask};
use crate::real::Real;
use crate::streaming::{KeyWindow, StepRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub frames_compared: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl EquivalenceReport {
    /// Element-wise comparison of two equally shaped matrices.
    pub fn compare(got: ArrayView2<f64>, want: ArrayView2<f64>, tolerance: f64) -> Self {
        let mut abs = 0.0f64;
        let mut rel = 0.0f64;
        let shapes_match = got.dim() == want.dim() || (got.nrows() == 0 && want.nrows() == 0);
        if shapes_match {
            for (&a, &b) in got.iter().zip(want.iter()) {
                let d = (a - b).abs();
                abs = abs.max(d);
                if b != 0.0 {
                    rel = rel.max(d / b.abs());
                }
            }
        } else {
            abs = f64::INFINITY;
            rel = f64::INFINITY;
        }
        Self {
            max_abs_diff: abs,
            max_rel_diff: rel,
            frames_compared: got.nrows().min(want.nrows()),
            tolerance,
            pass: shapes_match && abs <= tolerance,
        }
    }

    pub fn to_kv(&self) -> String {
        format!(
            "max_abs_diff={:e}\nmax_rel_diff={:e}\nframes_compared={}\ntolerance={:e}\npass={}\n",
            self.max_abs_diff, self.max_rel_diff, self.frames_compared, self.tolerance, self.pass
        )
    }
}

fn sinusoid(delta: i64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for k in 0..d / 2 {
        let angle = delta as f64 / 10000f64.powf((2 * k) as f64 / d as f64);
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    out
}

fn matvec(w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.nrows())
        .map(|i| (0..w.ncols()).map(|j| w[[i, j]] * x[j]).sum())
        .collect()
}

/// Literal O(T²) masked relative-position attention in double precision.
pub fn direct_attention(
    x: ArrayView2<f64>,
    positions: &[i64],
    mask: &AttnMask,
    p: &AttentionParams<f64>,
) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if positions.len() != n || mask.rows() != n || mask.cols() != n || p.w_q.ncols() != d {
        return Err(Error::ShapeMismatch(
            "direct attention inputs disagree".into(),
        ));
    }
    let h = p.heads;
    let dk = d / h;
    let rows: Vec<Vec<f64>> = x.outer_iter().map(|r| r.to_vec()).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|r| matvec(&p.w_q, r)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| matvec(&p.w_k, r)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| matvec(&p.w_v, r)).collect();
    let mut rel: HashMap<i64, Vec<f64>> = HashMap::new();
    let mut concat = vec![vec![0.0; d]; n];
    for head in 0..h {
        let lo = head * dk;
        for i in 0..n {
            let mut e = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if !mask.allowed(i, j) {
                    continue;
                }
                let delta = positions[i] - positions[j];
                let pr = rel
                    .entry(delta)
                    .or_insert_with(|| matvec(&p.w_r, &sinusoid(delta, d)));
                let mut s = 0.0;
                for a in lo..lo + dk {
                    s += (q[i][a] + p.u[a]) * k[j][a] + (q[i][a] + p.v[a]) * pr[a];
                }
                e[j] = s / (dk as f64).sqrt();
            }
            let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::EmptyRow { row: i });
            }
            let w: Vec<f64> = e
                .iter()
                .map(|&s| {
                    if s == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (s - m).exp()
                    }
                })
                .collect();
            let total: f64 = w.iter().sum();
            for j in 0..n {
                if w[j] != 0.0 {
                    for a in lo..lo + dk {
                        concat[i][a] += w[j] / total * v[j][a];
                    }
                }
            }
        }
    }
    let mut z = Array2::zeros((n, d));
    for i in 0..n {
        for (a, val) in matvec(&p.w_o, &concat[i]).into_iter().enumerate() {
            z[[i, a]] = val;
        }
    }
    Ok(z)
}

/// Token graph actually evaluated by a streaming run: one token per (step,
/// real window frame). Keys and convolution taps inside the current window
/// point at tokens of the same step; earlier frames point at the token of
/// the step that finalized them, which is what the caches hold.
#[derive(Debug, Clone)]
pub struct RealizedGeometry {
    pub geometry: Geometry,
    /// Index of the final token of each global frame.
    pub final_token: Vec<usize>,
    /// `(step, frame)` of every token.
    pub tokens: Vec<(usize, i64)>,
}

impl RealizedGeometry {
    pub fn build(
        records: &[StepRecord],
        c: usize,
        r: usize,
        l_att: usize,
        l_conv: usize,
        mode: ConvMode,
    ) -> Result<Self> {
        let la = mode.lookahead(r, l_conv) as i64;
        let (ci, ri) = (c as i64, r as i64);
        let final_range = |rec: &StepRecord| {
            let end = if rec.last {
                rec.valid_end
            } else {
                rec.offset + ci
            };
            (rec.offset.max(0), end)
        };
        let mut fin: Vec<usize> = Vec::new();
        for (s, rec) in records.iter().enumerate() {
            let (lo, hi) = final_range(rec);
            if lo != fin.len() as i64 {
                return Err(Error::CacheDesync {
                    expected: fin.len() as i64,
                    actual: lo,
                });
            }
            fin.extend((lo..hi).map(|_| s));
        }
        let mut index: HashMap<(usize, i64), usize> = HashMap::new();
        let mut tokens = Vec::new();
        let window_end = |rec: &StepRecord| (rec.offset + ci + ri).min(rec.valid_end);
        for (s, rec) in records.iter().enumerate() {
            for m in rec.offset.max(0)..window_end(rec) {
                index.insert((s, m), tokens.len());
                tokens.push((s, m));
            }
        }
        let source = |s: usize, rec: &StepRecord, j: i64| -> Result<usize> {
            let step = if j >= rec.offset { s } else { fin[j as usize] };
            index.get(&(step, j)).copied().ok_or_else(|| {
                Error::ShapeMismatch(format!("no token for frame {j} at step {step}"))
            })
        };
        let n = tokens.len();
        let mut mask = AttnMask::new(n, n);
        let mut taps = Vec::with_capacity(n);
        for (t, &(s, i)) in tokens.iter().enumerate() {
            let rec = &records[s];
            let end = window_end(rec);
            for j in (rec.offset - l_att as i64).max(0)..end {
                mask.set(t, source(s, rec, j)?, true);
            }
            let bound = (rec.offset
                + if i < rec.offset + ci {
                    ci + la
                } else {
                    ci + ri
                })
            .min(end);
            let mut row = Vec::with_capacity(2 * l_conv + 1);
            for delta in -(l_conv as i64)..=l_conv as i64 {
                let src = i + delta;
                row.push(if src < 0 || src >= bound {
                    None
                } else {
                    Some(source(s, rec, src)?)
                });
            }
            taps.push(row);
        }
        let final_token = fin
            .iter()
            .enumerate()
            .map(|(j, &s)| index[&(s, j as i64)])
            .collect();
        Ok(Self {
            geometry: Geometry {
                positions: tokens.iter().map(|&(_, m)| m).collect(),
                mask,
                taps,
            },
            final_token,
            tokens,
        })
    }

    /// Block-0 inputs of every token, gathered from the sub-sampled frames.
    pub fn token_inputs<T: Real>(&self, frames: ArrayView2<T>) -> Array2<T> {
        let mut x = Array2::zeros((self.tokens.len(), frames.ncols()));
        for (t, &(_, m)) in self.tokens.iter().enumerate() {
            x.row_mut(t).assign(&frames.row(m as usize));
        }
        x
    }
}

/// Mask over frames from per-frame key windows.
pub fn realized_mask(windows: &[KeyWindow]) -> AttnMask {
    let n = windows.len();
    let mut mask = AttnMask::new(n, n);
    for (i, w) in windows.iter().enumerate() {
        mask.allow_block(
            i..i + 1,
            w.lo.max(0) as usize..((w.hi + 1).max(0) as usize).min(n),
        );
    }
    mask
}

/// Runs the offline forward over the realized geometry of a finished stream
/// and compares its final-token logits with the streamed final logits.
#[allow(clippy::too_many_arguments)]
pub fn offline_equivalence<T: Real>(
    encoder: &Encoder<T>,
    frames: ArrayView2<T>,
    records: &[StepRecord],
    c: usize,
    r: usize,
    l_att: usize,
    mode: ConvMode,
    streamed_finals: ArrayView2<f64>,
) -> Result<EquivalenceReport> {
    let offline = realized_offline_logits(encoder, frames, records, c, r, l_att, mode)?;
    Ok(EquivalenceReport::compare(
        streamed_finals,
        offline.view(),
        T::PRECISION.equivalence_tolerance(),
    ))
}

/// Final logits per frame from the offline forward over the realized geometry.
pub fn realized_offline_logits<T: Real>(
    encoder: &Encoder<T>,
    frames: ArrayView2<T>,
    records: &[StepRecord],
    c: usize,
    r: usize,
    l_att: usize,
    mode: ConvMode,
) -> Result<Array2<f64>> {
    let rg = RealizedGeometry::build(records, c, r, l_att, encoder.config().l_conv(), mode)?;
    if rg.final_token.len() != frames.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "stream finalized {} frames, input has {}",
            rg.final_token.len(),
            frames.nrows()
        )));
    }
    let vocab = encoder.config().vocab_size;
    if rg.tokens.is_empty() {
        return Ok(Array2::zeros((0, vocab)));
    }
    let logits = encoder.forward_geometry(rg.token_inputs(frames).view(), &rg.geometry)?;
    let mut out = Array2::zeros((rg.final_token.len(), vocab));
    for (j, &t) in rg.final_token.iter().enumerate() {
        out.row_mut(j).assign(&logits.row(t).mapv(Real::to_f64));
    }
    Ok(out)
}

/// Per-tensor outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tensors: Vec<GradCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of `L = ½·Σ z²` through [`direct_attention`]
/// against the analytic backward pass, per parameter tensor and the input.
pub fn fd_gradcheck(
    params: &AttentionParams<f64>,
    x: ArrayView2<f64>,
    positions: &[i64],
    mask: &AttnMask,
    step: f64,
) -> Result<GradReport> {
    let d = params.d_model();
    let span =
        positions.iter().max().copied().unwrap_or(0) - positions.iter().min().copied().unwrap_or(0);
    let att = RelPosAttention::new(params.clone(), RelTable::new(-span, span, d))?;
    let z = direct_attention(x, positions, mask, params)?;
    let g = att.backward(x, positions, mask, &z)?;
    let loss = |p: &AttentionParams<f64>, x: ArrayView2<f64>| -> Result<f64> {
        Ok(direct_attention(x, positions, mask, p)?
            .iter()
            .map(|v| 0.5 * v * v)
            .sum())
    };

    fn fd_tensor(
        len: usize,
        step: f64,
        mut eval: impl FnMut(usize, f64) -> Result<f64>,
    ) -> Result<Vec<f64>> {
        (0..len)
            .map(|i| Ok((eval(i, step)? - eval(i, -step)?) / (2.0 * step)))
            .collect()
    }

    let mut out = Vec::new();
    let mut check = |name: &'static str, analytic: Vec<f64>, numeric: Vec<f64>| {
        let norm = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push(GradCheck {
            name,
            rel_error: rel_error(&analytic, &numeric),
            analytic_norm: norm,
        });
    };

    type Sel = fn(&mut AttentionParams<f64>) -> &mut [f64];
    let groups: [(&'static str, Sel, Vec<f64>); 7] = [
        (
            "w_q",
            |p| p.w_q.as_slice_mut().expect("contiguous"),
            g.w_q.iter().copied().collect(),
        ),
        (
            "w_k",
            |p| p.w_k.as_slice_mut().expect("contiguous"),
            g.w_k.iter().copied().collect(),
        ),
        (
            "w_v",
            |p| p.w_v.as_slice_mut().expect("contiguous"),
            g.w_v.iter().copied().collect(),
        ),
        (
            "w_r",
            |p| p.w_r.as_slice_mut().expect("contiguous"),
            g.w_r.iter().copied().collect(),
        ),
        (
            "w_o",
            |p| p.w_o.as_slice_mut().expect("contiguous"),
            g.w_o.iter().copied().collect(),
        ),
        (
            "u",
            |p| p.u.as_slice_mut().expect("contiguous"),
            g.u.to_vec(),
        ),
        (
            "v",
            |p| p.v.as_slice_mut().expect("contiguous"),
            g.v.to_vec(),
        ),
    ];
    for (name, sel, analytic) in groups {
        let mut p = params.clone();
        let len = sel(&mut p).len();
        let numeric = fd_tensor(len, step, |i, h| {
            let mut q = params.clone();
            sel(&mut q)[i] += h;
            loss(&q, x)
        })?;
        check(name, analytic, numeric);
    }
    let numeric_x = fd_tensor(x.len(), step, |i, h| {
        let mut xp = x.to_owned();
        xp.as_slice_mut().expect("contiguous")[i] += h;
        loss(params, xp.view())
    })?;
    check("x", g.x.iter().copied().collect(), numeric_x);

    let tolerance = 1e-4;
    let max_rel_error = out.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradReport {
        pass: max_rel_error <= tolerance,
        tensors: out,
        max_rel_error,
        tolerance,
    })
}

/// Empirical rate of `m` consecutive extended chunks, counted over disjoint
/// blocks of `m` chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsecutiveRate {
    pub m: u32,
    pub blocks: usize,
    pub rate: f64,
    pub expected: f64,
    pub sigma: f64,
}

impl ConsecutiveRate {
    pub fn within(&self, k_sigma: f64) -> bool {
        (self.rate - self.expected).abs() <= k_sigma * self.sigma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskStats {
    pub p: f64,
    pub chunks: usize,
    pub extension_rate: f64,
    pub sigma: f64,
    pub consecutive: Vec<ConsecutiveRate>,
}

impl MaskStats {
    pub fn within(&self, k_sigma: f64) -> bool {
        (self.extension_rate - self.p).abs() <= k_sigma * self.sigma
            && self.consecutive.iter().all(|c| c.within(k_sigma))
    }
}

/// Extension statistics of dynamic right-context masks: `chunks` chunks per
/// seed, one mask per seed.
pub fn mask_statistics(
    p: f64,
    c: usize,
    r: usize,
    seeds: &[u64],
    chunks: usize,
) -> Result<MaskStats> {
    let mut flags: Vec<Vec<bool>> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        flags.push(drc_plan(chunks * c, c, c, r, p, &mut rng)?.extension_flags());
    }
    let total: usize = flags.iter().map(Vec::len).sum();
    let ext: usize = flags.iter().flatten().filter(|&&f| f).count();
    let consecutive = (1..=3u32)
        .map(|m| {
            let mut blocks = 0;
            let mut hits = 0;
            for f in &flags {
                for block in f.chunks_exact(m as usize) {
                    blocks += 1;
                    hits += block.iter().all(|&b| b) as usize;
                }
            }
            let expected = p.powi(m as i32);
            ConsecutiveRate {
                m,
                blocks,
                rate: hits as f64 / blocks.max(1) as f64,
                expected,
                sigma: (expected * (1.0 - expected) / blocks.max(1) as f64).sqrt(),
            }
        })
        .collect();
    Ok(MaskStats {
        p,
        chunks: total,
        extension_rate: ext as f64 / total.max(1) as f64,
        sigma: (p * (1.0 - p) / total.max(1) as f64).sqrt(),
        consecutive,
    })
}

/// Dynamic right-context mask written line by line from the published
/// pseudo-code, negative column starts clipped to zero. Draws one uniform per
/// chunk in the same order as [`drc_plan`].
pub fn drc_mask_literal<R: Rng + ?Sized>(
    size: usize,
    l: usize,
    c: usize,
    r: usize,
    p: f64,
    rng: &mut R,
) -> AttnMask {
    let mut mask = AttnMask::new(size, size);
    let mut i = 0;
    while i < size {
        let mut cur_c = c;
        if rng.random::<f64>() < p {
            cur_c = c + r;
        }
        for row in i..(i + cur_c).min(size) {
            for col in i.saturating_sub(l)..(i + cur_c).min(size) {
                mask.set(row, col, true);
            }
        }
        i += c;
    }
    mask
}

/// Edit operations of a minimal alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WerCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Levenshtein alignment of `hyp` against `reference`.
pub fn wer<S: PartialEq>(hyp: &[S], reference: &[S]) -> WerCounts {
    let (n, m) = (reference.len(), hyp.len());
    // cost, subs, ins, dels
    let mut dp = vec![vec![(0usize, 0usize, 0usize, 0usize); m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate().skip(1) {
        row[0] = (i, 0, 0, i);
    }
    for (j, cell) in dp[0].iter_mut().enumerate().skip(1) {
        *cell = (j, 0, j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let (c, s, ins, del) = dp[i - 1][j - 1];
            let diag = if reference[i - 1] == hyp[j - 1] {
                (c, s, ins, del)
            } else {
                (c + 1, s + 1, ins, del)
            };
            let (c, s, ins, del) = dp[i][j - 1];
            let left = (c + 1, s, ins + 1, del);
            let (c, s, ins, del) = dp[i - 1][j];
            let up = (c + 1, s, ins, del + 1);
            dp[i][j] = [diag, up, left]
                .into_iter()
                .min_by_key(|t| t.0)
                .expect("three options");
        }
    }
    let (_, s, i, d) = dp[n][m];
    WerCounts {
        substitutions: s,
        insertions: i,
        deletions: d,
        ref_len: n,
    }
}

/// Default number of bootstrap resamples.
pub const DEFAULT_B: usize = 5000;
/// Default percentile level.
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Error counts of two systems on one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UttScore {
    pub errors_a: usize,
    pub errors_b: usize,
    pub ref_words: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapResult {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// Resamples that entered the percentiles (those with WER_A > 0).
    pub used: usize,
}

impl BootstrapResult {
    /// `mean_[lo,hi]` as a percentage.
    pub fn display(&self) -> String {
        format!(
            "{:.1}_[{:.1},{:.1}]",
            100.0 * self.mean,
            100.0 * self.lo,
            100.0 * self.hi
        )
    }
}

/// Relative WER reduction of B over A from pooled counts, `None` if A makes
/// no errors.
pub fn rwerr(scores: impl IntoIterator<Item = UttScore>) -> Option<f64> {
    let (mut ea, mut eb) = (0usize, 0usize);
    for s in scores {
        ea += s.errors_a;
        eb += s.errors_b;
    }
    // the shared reference length cancels
    (ea > 0).then(|| (ea as f64 - eb as f64) / ea as f64)
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn check_bootstrap_args(scores: &[UttScore], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::DegenerateInput("no utterances".into()));
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be in (0, 0.5), got {alpha}"
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.ref_words == 0) {
        return Err(Error::DegenerateInput(format!(
            "utterance {i} has no reference words"
        )));
    }
    rwerr(scores.iter().copied())
        .ok_or_else(|| Error::DegenerateInput("system A has zero WER".into()))
}

/// Percentile interval from explicit resamples (lists of utterance indices).
pub fn bootstrap_from_resamples(
    scores: &[UttScore],
    resamples: &[Vec<usize>],
    alpha: f64,
) -> Result<BootstrapResult> {
    let mean = check_bootstrap_args(scores, alpha)?;
    let mut stats: Vec<f64> = resamples
        .iter()
        .filter_map(|idx| rwerr(idx.iter().map(|&i| scores[i])))
        .collect();
    if stats.is_empty() {
        return Err(Error::DegenerateInput(
            "every resample has zero WER for system A".into(),
        ));
    }
    stats.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        mean,
        lo: percentile(&stats, alpha),
        hi: percentile(&stats, 1.0 - alpha),
        used: stats.len(),
    })
}

/// `b` resamples with replacement, seeded.
pub fn bootstrap_ci(
    scores: &[UttScore],
    b: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    if b == 0 {
        return Err(Error::InvalidConfig("B must be >= 1".into()));
    }
    check_bootstrap_args(scores, alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scores.len();
    let resamples: Vec<Vec<usize>> = (0..b)
        .map(|_| (0..n).map(|_| rng.random_range(0..n)).collect())
        .collect();
    bootstrap_from_resamples(scores, &resamples, alpha)
}

/// Random attention parameters in double precision, for checks.
pub fn random_params(d: usize, heads: usize, seed: u64) -> AttentionParams<f64> {
    AttentionParams::random(d, heads, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Uniform `[-1, 1)` matrix, for checks.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}
