//! Relative-position multi-head self-attention and its time-shifted streaming
//! step.
//!
//! Scores follow the Transformer-XL decomposition: content-content,
//! content-position, global content bias `u` and global position bias `v`,
//! all scaled by `1/sqrt(d_k)`. Relative encodings are fixed sinusoids of the
//! signed distance `i - j`; the learnable part lives in `W_R`.
//!
//! The streaming step feeds a window of `r + c` frames (the previous chunk's
//! last `r` inputs followed by the new chunk) and attends over
//! `l_att + r + c` key slots, the first `l_att` of which come from the cache.
//! Outputs for the first `c` window frames are final; the trailing `r` are
//! provisional and get recomputed by the next step.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::{check_offset, tsca_step_mask_until, AttnMask};
use crate::real::Real;

/// Chunk geometry of a streaming session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TscaConfig {
    /// Chunk size.
    pub c: usize,
    /// Right context obtained by the left shift.
    pub r: usize,
    /// Attention left context.
    pub l_att: usize,
}

impl TscaConfig {
    pub fn new(c: usize, r: usize, l_att: usize) -> Result<Self> {
        let cfg = Self { c, r, l_att };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(Error::InvalidConfig("chunk size c must be >= 1".into()));
        }
        if self.r >= self.c {
            return Err(Error::InvalidConfig(format!(
                "right context r={} must be < chunk c={}",
                self.r, self.c
            )));
        }
        Ok(())
    }

    /// Frames fed to the model per step.
    pub fn window(&self) -> usize {
        self.c + self.r
    }

    /// Key slots attended per step.
    pub fn key_slots(&self) -> usize {
        self.l_att + self.r + self.c
    }

    /// Offset before the first step.
    pub fn initial_offset(&self) -> i64 {
        -(self.r as i64)
    }

    /// Signed distances `i - j` that can occur inside a step window.
    pub fn distance_range(&self) -> (i64, i64) {
        (
            -((self.c + self.r) as i64),
            (self.l_att + self.r + self.c) as i64 - 1,
        )
    }
}

/// Sinusoidal encodings indexed by signed distance over `[min, max]`.
#[derive(Debug, Clone)]
pub struct RelTable {
    min: i64,
    max: i64,
    rows: Array2<f64>,
}

impl RelTable {
    pub fn new(min: i64, max: i64, d_model: usize) -> Self {
        assert!(min <= max, "empty distance range");
        let n = (max - min + 1) as usize;
        let mut rows = Array2::zeros((n, d_model));
        for (idx, mut row) in rows.outer_iter_mut().enumerate() {
            let delta = (min + idx as i64) as f64;
            for k in 0..d_model / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / d_model as f64);
                row[2 * k] = (delta * freq).sin();
                row[2 * k + 1] = (delta * freq).cos();
            }
        }
        Self { min, max, rows }
    }

    pub fn range(&self) -> (i64, i64) {
        (self.min, self.max)
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    #[inline]
    pub fn index(&self, distance: i64) -> Result<usize> {
        if distance < self.min || distance > self.max {
            return Err(Error::DistanceOutOfTable {
                distance,
                min: self.min,
                max: self.max,
            });
        }
        Ok((distance - self.min) as usize)
    }
}

/// Learnable attention parameters. Matrices are stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_r: Array2<T>,
    pub w_o: Array2<T>,
    pub u: Array1<T>,
    pub v: Array1<T>,
    pub heads: usize,
}

impl<T: Real> AttentionParams<T> {
    /// Uniform(-1/sqrt(d), 1/sqrt(d)) initialisation.
    pub fn random<R: Rng + ?Sized>(d_model: usize, heads: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut mat = || {
            Array2::from_shape_fn((d_model, d_model), |_| {
                T::from_f64(rng.random_range(-bound..bound))
            })
        };
        let (w_q, w_k, w_v, w_r, w_o) = (mat(), mat(), mat(), mat(), mat());
        let mut vec =
            || Array1::from_shape_fn(d_model, |_| T::from_f64(rng.random_range(-bound..bound)));
        let (u, v) = (vec(), vec());
        Self {
            w_q,
            w_k,
            w_v,
            w_r,
            w_o,
            u,
            v,
            heads,
        }
    }

    pub fn zeros(d_model: usize, heads: usize) -> Self {
        let z = || Array2::zeros((d_model, d_model));
        Self {
            w_q: z(),
            w_k: z(),
            w_v: z(),
            w_r: z(),
            w_o: z(),
            u: Array1::zeros(d_model),
            v: Array1::zeros(d_model),
            heads,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {d} not divisible by heads {}",
                self.heads
            )));
        }
        if !d.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("d_model {d} must be even")));
        }
        for (name, m) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_r", &self.w_r),
            ("w_o", &self.w_o),
        ] {
            if m.dim() != (d, d) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {:?}, expected ({d}, {d})",
                    m.dim()
                )));
            }
        }
        if self.u.len() != d || self.v.len() != d {
            return Err(Error::ShapeMismatch(
                "u/v length differs from d_model".into(),
            ));
        }
        Ok(())
    }
}

#[inline]
fn project<T: Real>(x: ArrayView2<T>, w: &Array2<T>) -> Array2<T> {
    x.dot(&w.t())
}

/// Per-head attention weights.
pub type HeadWeights<T> = Vec<Array2<T>>;

/// Row-wise softmax restricted to allowed entries. Disallowed entries are
/// exactly zero.
pub fn masked_softmax<T: Real>(e: &Array2<T>, mask: &AttnMask) -> Result<Array2<T>> {
    if e.dim() != (mask.rows(), mask.cols()) {
        return Err(Error::ShapeMismatch(format!(
            "scores {:?} vs mask {}x{}",
            e.dim(),
            mask.rows(),
            mask.cols()
        )));
    }
    let mut out = Array2::zeros(e.dim());
    for (i, (row, mut out_row)) in e.outer_iter().zip(out.outer_iter_mut()).enumerate() {
        let allowed = mask.row(i);
        let mut max = T::neg_infinity();
        for (&x, &a) in row.iter().zip(allowed) {
            if a && x > max {
                max = x;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::EmptyRow { row: i });
        }
        let mut sum = T::zero();
        for ((o, &x), &a) in out_row.iter_mut().zip(row.iter()).zip(allowed) {
            if a {
                *o = (x - max).exp();
                sum += *o;
            }
        }
        out_row.mapv_inplace(|v| v / sum);
    }
    Ok(out)
}

/// Attention layer with its relative-encoding table and the table already
/// projected through `W_R`.
#[derive(Debug, Clone)]
pub struct RelPosAttention<T> {
    params: AttentionParams<T>,
    table: RelTable,
    projected: Array2<T>,
}

impl<T: Real> RelPosAttention<T> {
    pub fn new(params: AttentionParams<T>, table: RelTable) -> Result<Self> {
        params.validate()?;
        if table.rows().ncols() != params.d_model() {
            return Err(Error::ShapeMismatch(
                "relative table width differs from d_model".into(),
            ));
        }
        let projected = project(table.rows().mapv(T::from_f64).view(), &params.w_r);
        Ok(Self {
            params,
            table,
            projected,
        })
    }

    /// Builds a table covering every distance of a streaming step.
    pub fn for_stream(params: AttentionParams<T>, cfg: &TscaConfig) -> Result<Self> {
        let (lo, hi) = cfg.distance_range();
        let d = params.d_model();
        Self::new(params, RelTable::new(lo, hi, d))
    }

    pub fn params(&self) -> &AttentionParams<T> {
        &self.params
    }

    pub fn table(&self) -> &RelTable {
        &self.table
    }

    pub fn d_model(&self) -> usize {
        self.params.d_model()
    }

    /// Per-head score matrices for projected queries and keys. Entries masked
    /// out (when a mask is given) are left at zero and their distance is not
    /// looked up.
    fn scores_projected(
        &self,
        q: &Array2<T>,
        k: &Array2<T>,
        q_pos: &[i64],
        k_pos: &[i64],
        mask: Option<&AttnMask>,
    ) -> Result<HeadWeights<T>> {
        let p = &self.params;
        let dk = p.d_k();
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let mut dist_idx = vec![0usize; q_pos.len() * k_pos.len()];
        for (i, &qi) in q_pos.iter().enumerate() {
            for (j, &kj) in k_pos.iter().enumerate() {
                if mask.is_none_or(|m| m.allowed(i, j)) {
                    dist_idx[i * k_pos.len() + j] = self.table.index(qi - kj)?;
                }
            }
        }
        let mut out = Vec::with_capacity(p.heads);
        for h in 0..p.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let ph = self.projected.slice(cols);
            let qu = &qh + &p.u.slice(s![h * dk..(h + 1) * dk]);
            let qv = &qh + &p.v.slice(s![h * dk..(h + 1) * dk]);
            let content = qu.dot(&kh.t());
            let position = qv.dot(&ph.t());
            let mut e = Array2::zeros((q_pos.len(), k_pos.len()));
            for ((i, j), v) in e.indexed_iter_mut() {
                if mask.is_none_or(|m| m.allowed(i, j)) {
                    *v = (content[[i, j]] + position[[i, dist_idx[i * k_pos.len() + j]]]) * scale;
                }
            }
            out.push(e);
        }
        Ok(out)
    }

    /// Raw scores between query rows `xq` at `q_pos` and key rows `xk` at
    /// `k_pos`, one matrix per head.
    pub fn rel_scores(
        &self,
        xq: ArrayView2<T>,
        xk: ArrayView2<T>,
        q_pos: &[i64],
        k_pos: &[i64],
    ) -> Result<HeadWeights<T>> {
        self.check_rows(xq, q_pos)?;
        self.check_rows(xk, k_pos)?;
        let q = project(xq, &self.params.w_q);
        let k = project(xk, &self.params.w_k);
        self.scores_projected(&q, &k, q_pos, k_pos, None)
    }

    fn check_rows(&self, x: ArrayView2<T>, pos: &[i64]) -> Result<()> {
        if x.ncols() != self.d_model() || x.nrows() != pos.len() {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} with {} positions, d_model {}",
                x.dim(),
                pos.len(),
                self.d_model()
            )));
        }
        Ok(())
    }

    /// Weighted sum of value rows per head, heads concatenated, then the
    /// output projection.
    pub fn attend(&self, alpha: &HeadWeights<T>, values: &Array2<T>) -> Result<Array2<T>> {
        let p = &self.params;
        let dk = p.d_k();
        if alpha.len() != p.heads {
            return Err(Error::ShapeMismatch(format!(
                "{} head weights, {} heads",
                alpha.len(),
                p.heads
            )));
        }
        let n_q = alpha.first().map_or(0, |a| a.nrows());
        let mut y = Array2::zeros((n_q, p.d_model()));
        for (h, a) in alpha.iter().enumerate() {
            if a.ncols() != values.nrows() {
                return Err(Error::ShapeMismatch(
                    "weights and values disagree on key count".into(),
                ));
            }
            let vh = values.slice(s![.., h * dk..(h + 1) * dk]);
            y.slice_mut(s![.., h * dk..(h + 1) * dk])
                .assign(&a.dot(&vh));
        }
        Ok(project(y.view(), &p.w_o))
    }

    /// Offline masked self-attention over `x` whose rows sit at `positions`.
    pub fn forward(
        &self,
        x: ArrayView2<T>,
        positions: &[i64],
        mask: &AttnMask,
    ) -> Result<Array2<T>> {
        self.check_rows(x, positions)?;
        if mask.rows() != x.nrows() || mask.cols() != x.nrows() {
            return Err(Error::ShapeMismatch(
                "mask does not match sequence length".into(),
            ));
        }
        let p = &self.params;
        let q = project(x, &p.w_q);
        let k = project(x, &p.w_k);
        let v = project(x, &p.w_v);
        let scores = self.scores_projected(&q, &k, positions, positions, Some(mask))?;
        let alpha = scores
            .iter()
            .map(|e| masked_softmax(e, mask))
            .collect::<Result<Vec<_>>>()?;
        self.attend(&alpha, &v)
    }

    /// Attention for a full streaming window (`r + c` rows starting at global
    /// frame `o`), reading and advancing the cache. Keys at negative frames or
    /// at/after `valid_end` are hidden.
    pub fn forward_window(
        &self,
        window: ArrayView2<T>,
        o: i64,
        cfg: &TscaConfig,
        valid_end: i64,
        cache: &mut AttnCache<T>,
    ) -> Result<Array2<T>> {
        check_offset(o, cfg.c, cfg.r)?;
        if window.nrows() != cfg.window() || window.ncols() != self.d_model() {
            return Err(Error::ShapeMismatch(format!(
                "window {:?}, expected ({}, {})",
                window.dim(),
                cfg.window(),
                self.d_model()
            )));
        }
        let origin = o - cfg.l_att as i64;
        if cache.start != origin {
            return Err(Error::CacheDesync {
                expected: origin,
                actual: cache.start,
            });
        }
        let p = &self.params;
        let q = project(window, &p.w_q);
        let k_new = project(window, &p.w_k);
        let v_new = project(window, &p.w_v);
        let keys = concatenate(Axis(0), &[cache.keys.view(), k_new.view()]).expect("same width");
        let values =
            concatenate(Axis(0), &[cache.values.view(), v_new.view()]).expect("same width");

        let step_mask = tsca_step_mask_until(o, cfg.c, cfg.r, cfg.l_att, valid_end)?;
        let mask = step_mask.select_rows(cfg.l_att..cfg.key_slots());
        let k_pos: Vec<i64> = (0..cfg.key_slots() as i64).map(|q| origin + q).collect();
        let q_pos = &k_pos[cfg.l_att..];

        let scores = self.scores_projected(&q, &keys, q_pos, &k_pos, Some(&mask))?;
        let alpha = scores
            .iter()
            .map(|e| masked_softmax(e, &mask))
            .collect::<Result<Vec<_>>>()?;
        let z = self.attend(&alpha, &values)?;

        // Rows [c, c + l_att) of (cache ++ window) become the next left context.
        let inputs = concatenate(Axis(0), &[cache.inputs.view(), window]).expect("same width");
        let keep = s![cfg.c..cfg.c + cfg.l_att, ..];
        cache.keys = keys.slice(keep).to_owned();
        cache.values = values.slice(keep).to_owned();
        cache.inputs = inputs.slice(keep).to_owned();
        cache.start = origin + cfg.c as i64;
        Ok(z)
    }

    /// One time-shifted step for a standalone attention layer: the cached
    /// input tail is prepended to `chunk`, final outputs cover global frames
    /// `[max(o, 0), o + c)` and provisional outputs `[o + c, o + c + r)`.
    pub fn tsca_step(
        &self,
        chunk: ArrayView2<T>,
        cache: &mut AttnCache<T>,
        o: i64,
        cfg: &TscaConfig,
    ) -> Result<TscaOutput<T>> {
        if chunk.nrows() != cfg.c {
            return Err(Error::ChunkSizeMismatch {
                expected: cfg.c,
                got: chunk.nrows(),
            });
        }
        let window = concatenate(Axis(0), &[cache.input_tail.view(), chunk]).expect("same width");
        let z = self.forward_window(window.view(), o, cfg, i64::MAX, cache)?;
        cache.input_tail = window.slice(s![cfg.c.., ..]).to_owned();
        let skip = (-o).max(0) as usize;
        Ok(TscaOutput {
            final_start: o.max(0),
            final_rows: z.slice(s![skip..cfg.c, ..]).to_owned(),
            provisional_rows: z.slice(s![cfg.c.., ..]).to_owned(),
        })
    }

    /// Gradients of `sum(dz ⊙ forward(x))` with respect to every parameter
    /// group and the input.
    pub fn backward(
        &self,
        x: ArrayView2<T>,
        positions: &[i64],
        mask: &AttnMask,
        dz: &Array2<T>,
    ) -> Result<AttentionGrads<T>> {
        self.check_rows(x, positions)?;
        let p = &self.params;
        let (n, d) = x.dim();
        let dk = p.d_k();
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let q = project(x, &p.w_q);
        let k = project(x, &p.w_k);
        let v = project(x, &p.w_v);
        let scores = self.scores_projected(&q, &k, positions, positions, Some(mask))?;
        let alpha = scores
            .iter()
            .map(|e| masked_softmax(e, mask))
            .collect::<Result<Vec<_>>>()?;

        let mut y = Array2::zeros((n, d));
        for (h, a) in alpha.iter().enumerate() {
            let cols = s![.., h * dk..(h + 1) * dk];
            y.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        }
        let d_wo = dz.t().dot(&y);
        let dy = dz.dot(&p.w_o);

        let n_dist = self.projected.nrows();
        let mut dq = Array2::<T>::zeros((n, d));
        let mut dk_mat = Array2::<T>::zeros((n, d));
        let mut dv = Array2::<T>::zeros((n, d));
        let mut dp = Array2::<T>::zeros((n_dist, d));
        let mut du = Array1::<T>::zeros(d);
        let mut dvb = Array1::<T>::zeros(d);

        for (h, a) in alpha.iter().enumerate() {
            let cols = h * dk..(h + 1) * dk;
            let dy_h = dy.slice(s![.., cols.clone()]);
            let v_h = v.slice(s![.., cols.clone()]);
            let da = dy_h.dot(&v_h.t());
            dv.slice_mut(s![.., cols.clone()]).assign(&a.t().dot(&dy_h));
            for i in 0..n {
                let dot: T = (0..n).map(|j| a[[i, j]] * da[[i, j]]).sum();
                for j in 0..n {
                    if !mask.allowed(i, j) {
                        continue;
                    }
                    let g = a[[i, j]] * (da[[i, j]] - dot) * scale;
                    if g == T::zero() {
                        continue;
                    }
                    let di = self.table.index(positions[i] - positions[j])?;
                    for c in cols.clone() {
                        let kj = k[[j, c]];
                        let pd = self.projected[[di, c]];
                        dq[[i, c]] += g * (kj + pd);
                        du[c] += g * kj;
                        dvb[c] += g * pd;
                        dk_mat[[j, c]] += g * (q[[i, c]] + p.u[c]);
                        dp[[di, c]] += g * (q[[i, c]] + p.v[c]);
                    }
                }
            }
        }

        let table = self.table.rows().mapv(T::from_f64);
        Ok(AttentionGrads {
            w_q: dq.t().dot(&x),
            w_k: dk_mat.t().dot(&x),
            w_v: dv.t().dot(&x),
            w_r: dp.t().dot(&table),
            w_o: d_wo,
            u: du,
            v: dvb,
            x: dq.dot(&p.w_q) + dk_mat.dot(&p.w_k) + dv.dot(&p.w_v),
        })
    }
}

/// Gradients of a scalar loss through one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionGrads<T> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_r: Array2<T>,
    pub w_o: Array2<T>,
    pub u: Array1<T>,
    pub v: Array1<T>,
    pub x: Array2<T>,
}

/// Output of one standalone time-shifted step.
#[derive(Debug, Clone)]
pub struct TscaOutput<T> {
    /// Global frame of the first final row.
    pub final_start: i64,
    pub final_rows: Array2<T>,
    pub provisional_rows: Array2<T>,
}

/// Per-layer streaming state: projected keys/values and the attention inputs
/// for the `l_att` frames preceding the current window, plus the raw input
/// tail of `r` frames used by [`RelPosAttention::tsca_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttnCache<T> {
    keys: Array2<T>,
    values: Array2<T>,
    inputs: Array2<T>,
    pub(crate) input_tail: Array2<T>,
    start: i64,
}

impl<T: Real> AttnCache<T> {
    pub fn new(cfg: &TscaConfig, d_model: usize) -> Self {
        Self {
            keys: Array2::zeros((cfg.l_att, d_model)),
            values: Array2::zeros((cfg.l_att, d_model)),
            inputs: Array2::zeros((cfg.l_att, d_model)),
            input_tail: Array2::zeros((cfg.r, d_model)),
            start: cfg.initial_offset() - cfg.l_att as i64,
        }
    }

    /// Global frame of cached row 0.
    pub fn valid_from(&self) -> i64 {
        self.start
    }

    /// Number of cached rows that hold real (non-negative) frames.
    pub fn valid_rows(&self) -> usize {
        let n = self.keys.nrows() as i64;
        (self.start + n).clamp(0, n) as usize
    }

    /// Global frames of the cached rows.
    pub fn positions(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.keys.nrows() as i64).map(move |i| self.start + i)
    }

    pub fn keys(&self) -> &Array2<T> {
        &self.keys
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn inputs(&self) -> &Array2<T> {
        &self.inputs
    }

    /// Mutable key rows. Writing here desynchronises the cache from its
    /// inputs; used for fault-injection checks.
    pub fn keys_mut(&mut self) -> &mut Array2<T> {
        &mut self.keys
    }
}

/// Recomputes `W_k x` and `W_v x` for the cached inputs and reports whether
/// both match the cache bit for bit.
pub fn cache_matches_inputs<T: Real>(attn: &RelPosAttention<T>, cache: &AttnCache<T>) -> bool {
    let p = attn.params();
    (0..cache.inputs.nrows()).all(|i| {
        let row = cache.inputs.slice(s![i..i + 1, ..]);
        project(row, &p.w_k).row(0) == cache.keys.row(i)
            && project(row, &p.w_v).row(0) == cache.values.row(i)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::chunk_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(d: usize, heads: usize, seed: u64, min: i64, max: i64) -> RelPosAttention<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RelPosAttention::new(
            AttentionParams::random(d, heads, &mut rng),
            RelTable::new(min, max, d),
        )
        .unwrap()
    }

    fn random_x(t: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = AttentionParams::<f64>::random(8, 2, &mut rng);
        params.u.fill(0.0);
        params.v.fill(0.0);
        let att = RelPosAttention::new(params, RelTable::new(-10, 10, 8)).unwrap();
        let x = Array2::zeros((5, 8));
        let pos: Vec<i64> = (0..5).collect();
        for e in att.rel_scores(x.view(), x.view(), &pos, &pos).unwrap() {
            assert!(e.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scores_depend_only_on_relative_distance() {
        let att = layer(8, 2, 1, -40, 40);
        let x = random_x(5, 8, 2);
        let pos: Vec<i64> = (0..5).collect();
        let shifted: Vec<i64> = (17..22).collect();
        let a = att.rel_scores(x.view(), x.view(), &pos, &pos).unwrap();
        let b = att
            .rel_scores(x.view(), x.view(), &shifted, &shifted)
            .unwrap();
        for (ea, eb) in a.iter().zip(&b) {
            for (u, v) in ea.iter().zip(eb.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_outside_table_is_an_error() {
        let att = layer(8, 2, 1, -2, 2);
        let x = random_x(5, 8, 2);
        let pos: Vec<i64> = (0..5).collect();
        assert!(matches!(
            att.rel_scores(x.view(), x.view(), &pos, &pos),
            Err(Error::DistanceOutOfTable { .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_single_key() {
        let e = Array2::from_elem((2, 4), 0.3f64);
        let mut all = AttnMask::new(2, 4);
        all.allow_block(0..2, 0..4);
        let a = masked_softmax(&e, &all).unwrap();
        assert!(a.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut m = AttnMask::new(3, 3);
        for i in 0..3 {
            m.set(i, (i + 1) % 3, true);
        }
        let a = masked_softmax(&random_x(3, 3, 0), &m).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a[[i, j]], if j == (i + 1) % 3 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn softmax_large_gap_is_stable() {
        let e = Array2::from_shape_vec((1, 2), vec![1000.0f64, 950.0]).unwrap();
        let a = masked_softmax(&e, &AttnMask::full(2).select_rows(0..1)).unwrap();
        // exp(-50) / (1 + exp(-50)) evaluated by hand: 1.9287498479639178e-22
        assert!((a[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((a[[0, 1]] - 1.928_749_847_963_917_8e-22).abs() < 1e-34);
    }

    #[test]
    fn softmax_empty_row_errors() {
        let mut m = AttnMask::full(2);
        m.set(1, 0, false);
        m.set(1, 1, false);
        assert_eq!(
            masked_softmax(&Array2::<f64>::zeros((2, 2)), &m).unwrap_err(),
            Error::EmptyRow { row: 1 }
        );
    }

    #[test]
    fn identity_weights_route_values() {
        let d = 4;
        let att = layer(d, 1, 3, -5, 5);
        let x = random_x(3, d, 4);
        let mut alpha = Array2::zeros((3, 3));
        for i in 0..3 {
            alpha[[i, i]] = 1.0;
        }
        let v = project(x.view(), &att.params().w_v);
        let z = att.attend(&vec![alpha], &v).unwrap();
        let expected = project(v.view(), &att.params().w_o);
        assert!((&z - &expected).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let att = layer(8, 2, 5, -10, 10);
        let row = random_x(1, 8, 6);
        let x = Array2::from_shape_fn((6, 8), |(_, j)| row[[0, j]]);
        let pos: Vec<i64> = (0..6).collect();
        let z = att
            .forward(x.view(), &pos, &chunk_mask(6, 2, 3).unwrap())
            .unwrap();
        for i in 1..6 {
            for j in 0..8 {
                assert!((z[[i, j]] - z[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_shift_step_is_chunk_streaming() {
        let cfg = TscaConfig::new(4, 0, 4).unwrap();
        let d = 8;
        let x = random_x(12, d, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = AttentionParams::random(d, 2, &mut rng);
        let att = RelPosAttention::new(params, RelTable::new(-12, 12, d)).unwrap();
        let mut cache = AttnCache::new(&cfg, d);
        let mut streamed = Vec::new();
        for k in 0..3 {
            let out = att
                .tsca_step(
                    x.slice(s![k * 4..k * 4 + 4, ..]),
                    &mut cache,
                    (k * 4) as i64,
                    &cfg,
                )
                .unwrap();
            assert_eq!(out.provisional_rows.nrows(), 0);
            assert_eq!(out.final_rows.nrows(), 4);
            streamed.push(out.final_rows);
        }
        let streamed = concatenate(
            Axis(0),
            &streamed.iter().map(|a| a.view()).collect::<Vec<_>>(),
        )
        .unwrap();
        let pos: Vec<i64> = (0..12).collect();
        let offline = att
            .forward(x.view(), &pos, &chunk_mask(12, 4, 4).unwrap())
            .unwrap();
        assert!((&streamed - &offline).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn cache_tracks_offset() {
        let cfg = TscaConfig::new(4, 2, 4).unwrap();
        let att = layer(8, 2, 1, -20, 20);
        let mut cache = AttnCache::new(&cfg, 8);
        let x = random_x(4, 8, 1);
        assert!(matches!(
            att.tsca_step(x.view(), &mut cache, 2, &cfg),
            Err(Error::CacheDesync { .. })
        ));
        att.tsca_step(x.view(), &mut cache, -2, &cfg).unwrap();
        assert_eq!(cache.valid_from(), 2 - 4);
        assert!(cache_matches_inputs(&att, &cache));
        assert!(att
            .tsca_step(x.slice(s![..3, ..]), &mut cache, 2, &cfg)
            .is_err());
    }

    #[test]
    fn step_window_is_constant_size() {
        for r in [0, 3, 6] {
            let cfg = TscaConfig::new(10, r, 12).unwrap();
            assert_eq!(cfg.key_slots(), 12 + 10 + r);
        }
        assert_eq!(
            TscaConfig::new(10, 6, 12).unwrap().key_slots(),
            TscaConfig::new(16, 0, 12).unwrap().key_slots()
        );
    }
}
