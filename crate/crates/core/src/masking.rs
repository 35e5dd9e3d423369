//! Chunk masks, dynamic right-context masks and the per-step masks used by
//! time-shifted streaming inference.
//!
//! Masks are built from a compact interval plan ([`ChunkPlan`]): one record
//! per chunk holding its start, its effective length (`c` or `c + r`) and the
//! left-context width. The dense [`AttnMask`] is derived from the plan, so
//! statistics over very long plans never need a dense matrix.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};

/// Chunking and context hyperparameters, in sub-sampled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextConfig {
    /// Smallest chunk size.
    pub c0: usize,
    /// Smallest right context.
    pub r0: usize,
    /// Range size; the ranges hold `n + 1` entries.
    pub n: usize,
    /// Common difference between consecutive right-context sizes.
    pub d_step: usize,
    /// Probability that a chunk extends by `r` frames.
    pub p: f64,
    /// Attention left context.
    pub l_att: usize,
    /// Depthwise convolution kernel width (odd).
    pub kernel_size: usize,
    /// Duration of one sub-sampled frame in milliseconds.
    pub frame_ms: f64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            c0: 10,
            r0: 0,
            n: 3,
            d_step: 3,
            p: 0.75,
            l_att: 60,
            kernel_size: 15,
            frame_ms: 40.0,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) || self.p.is_nan() {
            return Err(Error::InvalidConfig(format!(
                "p = {} outside [0, 1]",
                self.p
            )));
        }
        if self.c0 == 0 {
            return Err(Error::InvalidConfig("c0 must be >= 1".into()));
        }
        if self.d_step == 0 {
            return Err(Error::InvalidConfig("d_step must be >= 1".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        if self.frame_ms.is_nan() || self.frame_ms <= 0.0 {
            return Err(Error::InvalidConfig("frame_ms must be positive".into()));
        }
        Ok(())
    }

    /// Convolution reach on each side: `(kernel_size - 1) / 2`.
    pub fn l_conv(&self) -> usize {
        (self.kernel_size - 1) / 2
    }
}

/// Convolution half-width for an odd kernel.
pub fn l_conv(kernel_size: usize) -> usize {
    kernel_size.saturating_sub(1) / 2
}

/// Chunk and right-context training ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextRanges {
    pub chunk_sizes: Vec<usize>,
    pub right_sizes: Vec<usize>,
}

impl ContextRanges {
    pub fn len(&self) -> usize {
        self.chunk_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_sizes.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.chunk_sizes
            .iter()
            .copied()
            .zip(self.right_sizes.iter().copied())
    }
}

/// Builds `R` with `r_i = r_{i-1} + d` and `C` with `c_i = c_0 + r_i`.
pub fn context_ranges(cfg: &ContextConfig) -> Result<ContextRanges> {
    cfg.validate()?;
    let right_sizes: Vec<usize> = (0..=cfg.n).map(|i| cfg.r0 + i * cfg.d_step).collect();
    let chunk_sizes: Vec<usize> = right_sizes.iter().map(|r| cfg.c0 + r).collect();
    for (&c, &r) in chunk_sizes.iter().zip(&right_sizes) {
        if r >= c {
            return Err(Error::InvalidConfig(format!(
                "pair (c={c}, r={r}) violates r < c"
            )));
        }
    }
    Ok(ContextRanges {
        chunk_sizes,
        right_sizes,
    })
}

/// Draws one `(c, r)` pair uniformly from the ranges.
pub fn sample_training_context<R: Rng + ?Sized>(
    ranges: &ContextRanges,
    rng: &mut R,
) -> (usize, usize) {
    assert!(!ranges.is_empty(), "context ranges must be non-empty");
    let i = rng.random_range(0..ranges.len());
    (ranges.chunk_sizes[i], ranges.right_sizes[i])
}

/// Dense boolean attention mask; row = query frame, column = key frame.
#[derive(Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl std::fmt::Debug for AttnMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "AttnMask {}x{}\n{}",
            self.rows,
            self.cols,
            self.to_text()
        )
    }
}

impl AttnMask {
    /// All-false mask.
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![false; rows * cols],
        }
    }

    /// All-true square mask (full attention).
    pub fn full(size: usize) -> Self {
        Self {
            rows: size,
            cols: size,
            allowed: vec![true; size * size],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Frame count of a square mask.
    pub fn size(&self) -> usize {
        debug_assert_eq!(self.rows, self.cols);
        self.rows
    }

    #[inline]
    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.allowed[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allowed[row * self.cols..(row + 1) * self.cols]
    }

    /// Sets the rectangle `rows × cols` to true.
    pub fn allow_block(&mut self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) {
        for i in rows {
            self.allowed[i * self.cols + cols.start..i * self.cols + cols.end].fill(true);
        }
    }

    /// Sub-mask made of the given rows.
    pub fn select_rows(&self, rows: std::ops::Range<usize>) -> AttnMask {
        AttnMask {
            rows: rows.len(),
            cols: self.cols,
            allowed: self.allowed[rows.start * self.cols..rows.end * self.cols].to_vec(),
        }
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// True when every entry allowed in `other` is allowed here.
    pub fn contains(&self, other: &AttnMask) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .allowed
                .iter()
                .zip(&other.allowed)
                .all(|(&a, &b)| a || !b)
    }

    /// Index of the first row without any allowed key.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| !self.row(i).iter().any(|&a| a))
    }

    /// Plain-text grid: one line per row, `1` allowed, `0` disallowed.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            for &a in self.row(i) {
                out.push(if a { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        let cols = lines.first().map_or(0, |l| l.len());
        let mut mask = AttnMask::new(lines.len(), cols);
        for (i, line) in lines.iter().enumerate() {
            if line.len() != cols {
                return Err(Error::Format(format!(
                    "row {i} has {} columns, expected {cols}",
                    line.len()
                )));
            }
            for (j, ch) in line.chars().enumerate() {
                match ch {
                    '1' => mask.set(i, j, true),
                    '0' => {}
                    other => return Err(Error::Format(format!("unexpected character '{other}'"))),
                }
            }
        }
        Ok(mask)
    }

    /// ASCII PGM (P2), 255 = allowed, 0 = disallowed.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.cols, self.rows);
        for i in 0..self.rows {
            let line: Vec<&str> = self
                .row(i)
                .iter()
                .map(|&a| if a { "255" } else { "0" })
                .collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

/// One chunk of a mask plan: rows `[start, start + len)` see columns
/// `[start - left, start + len)`, both clipped to the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkInterval {
    pub start: usize,
    pub len: usize,
    pub extended: bool,
}

/// Compact interval form of a chunk or dynamic right-context mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub size: usize,
    pub left: usize,
    pub chunk: usize,
    pub right: usize,
    pub intervals: Vec<ChunkInterval>,
}

impl ChunkPlan {
    pub fn to_mask(&self) -> AttnMask {
        let mut mask = AttnMask::new(self.size, self.size);
        for iv in &self.intervals {
            let end = (iv.start + iv.len).min(self.size);
            let col_lo = iv.start.saturating_sub(self.left);
            mask.allow_block(iv.start..end, col_lo..end);
        }
        mask
    }

    pub fn extension_flags(&self) -> Vec<bool> {
        self.intervals.iter().map(|iv| iv.extended).collect()
    }

    pub fn extended_count(&self) -> usize {
        self.intervals.iter().filter(|iv| iv.extended).count()
    }

    /// Chunk owning frame `i` (the chunk whose stride covers it).
    pub fn chunk_of(&self, frame: usize) -> &ChunkInterval {
        &self.intervals[frame / self.chunk]
    }
}

fn check_chunk_args(size: usize, c: usize) -> Result<()> {
    if size == 0 {
        return Err(Error::InvalidConfig("mask size must be >= 1".into()));
    }
    if c == 0 {
        return Err(Error::InvalidConfig("chunk size must be >= 1".into()));
    }
    Ok(())
}

pub fn chunk_plan(size: usize, l: usize, c: usize) -> Result<ChunkPlan> {
    check_chunk_args(size, c)?;
    let intervals = (0..size)
        .step_by(c)
        .map(|start| ChunkInterval {
            start,
            len: c,
            extended: false,
        })
        .collect();
    Ok(ChunkPlan {
        size,
        left: l,
        chunk: c,
        right: 0,
        intervals,
    })
}

/// Conventional chunk mask: frame `i` attends `[chunk_start - l, chunk_end]`.
pub fn chunk_mask(size: usize, l: usize, c: usize) -> Result<AttnMask> {
    Ok(chunk_plan(size, l, c)?.to_mask())
}

/// Interval plan of a dynamic right-context mask. One uniform draw per chunk;
/// the chunk extends by `r` frames when the draw is below `p`.
pub fn drc_plan<R: Rng + ?Sized>(
    size: usize,
    l: usize,
    c: usize,
    r: usize,
    p: f64,
    rng: &mut R,
) -> Result<ChunkPlan> {
    check_chunk_args(size, c)?;
    if r >= c {
        return Err(Error::InvalidConfig(format!(
            "right context r={r} must be < chunk c={c}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("p = {p} outside [0, 1]")));
    }
    if r >= l && r > 0 {
        log::warn!("right context r={r} is not below left context l={l}");
    }
    let mut intervals = Vec::with_capacity(size.div_ceil(c));
    let mut i = 0;
    while i < size {
        let extended = rng.random::<f64>() < p;
        intervals.push(ChunkInterval {
            start: i,
            len: if extended { c + r } else { c },
            extended,
        });
        i += c;
    }
    Ok(ChunkPlan {
        size,
        left: l,
        chunk: c,
        right: r,
        intervals,
    })
}

/// Dynamic right-context mask.
pub fn drc_mask<R: Rng + ?Sized>(
    size: usize,
    l: usize,
    c: usize,
    r: usize,
    p: f64,
    rng: &mut R,
) -> Result<AttnMask> {
    Ok(drc_plan(size, l, c, r, p, rng)?.to_mask())
}

/// Global frame index of slot 0 in a step window starting at offset `o`.
pub fn step_window_origin(o: i64, l_att: usize) -> i64 {
    o - l_att as i64
}

/// Mask over the `(l_att + r + c)`-slot window of the streaming step at
/// offset `o`. Slot `q` holds global frame `o - l_att + q`. Keys at negative
/// frames (initial padding) are disallowed; rows for padding slots keep only
/// their diagonal so no row is empty.
pub fn tsca_step_mask(o: i64, c: usize, r: usize, l_att: usize) -> Result<AttnMask> {
    tsca_step_mask_until(o, c, r, l_att, i64::MAX)
}

/// Like [`tsca_step_mask`] but also hides frames at or past `valid_end`
/// (right padding of a final partial chunk).
pub fn tsca_step_mask_until(
    o: i64,
    c: usize,
    r: usize,
    l_att: usize,
    valid_end: i64,
) -> Result<AttnMask> {
    check_offset(o, c, r)?;
    let slots = l_att + r + c;
    let origin = step_window_origin(o, l_att);
    let real = |q: usize| {
        let g = origin + q as i64;
        g >= 0 && g < valid_end
    };
    let mut mask = AttnMask::new(slots, slots);
    for i in 0..slots {
        if real(i) {
            for j in 0..slots {
                if real(j) {
                    mask.set(i, j, true);
                }
            }
        } else {
            mask.set(i, i, true);
        }
    }
    Ok(mask)
}

pub(crate) fn check_offset(o: i64, c: usize, r: usize) -> Result<()> {
    let shifted = o + r as i64;
    if shifted < 0 || c == 0 || shifted % c as i64 != 0 {
        return Err(Error::InvalidOffset {
            offset: o,
            right: r,
        });
    }
    Ok(())
}
