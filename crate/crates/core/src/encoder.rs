//! Toy Conformer encoder with a CTC head, runnable offline over an explicit
//! geometry or one time-shifted step at a time.
//!
//! Each block: `x += ½·FFN(x)`, `x += MHSA(x)`, `x += Conv(x)`,
//! `x += ½·FFN(x)`, then LayerNorm. All sub-layers are pre-norm. The conv
//! module is pointwise (d → 2d), GLU, depthwise, LayerNorm, swish, pointwise.

use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionParams, AttnCache, RelPosAttention, RelTable, TscaConfig};
use crate::convolution::{
    conv_window, ConvCache, ConvLayout, ConvMode, DepthwiseKernel, Subsampler,
};
use crate::error::{Error, Result};
use crate::io::WeightSet;
use crate::masking::AttnMask;
use crate::real::{Precision, Real};

pub const BLANK: u32 = 0;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub kernel_size: usize,
    /// Output classes including blank (id 0).
    pub vocab_size: usize,
    /// Raw feature dimension entering the sub-sampler.
    pub d_feat: usize,
    pub precision: Precision,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 2,
            ffn_dim: 256,
            kernel_size: 15,
            vocab_size: 32,
            d_feat: 80,
            precision: Precision::Double,
        }
    }
}

impl EncoderConfig {
    /// 12 layers, 256 dims, 4 heads, 2048 FFN.
    pub fn full_scale() -> Self {
        Self {
            layers: 12,
            d_model: 256,
            heads: 4,
            ffn_dim: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model {} must be even", self.d_model));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must include blank and at least one token".into());
        }
        if self.ffn_dim == 0 || self.d_feat == 0 {
            return bad("ffn_dim and d_feat must be >= 1".into());
        }
        Ok(())
    }

    pub fn l_conv(&self) -> usize {
        self.kernel_size / 2
    }
}

/// Seeded float32 weights for `cfg`, uniform in ±1/√fan_in.
pub fn random_weights(cfg: &EncoderConfig, seed: u64) -> Result<WeightSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = WeightSet::new();
    let mut put = |w: &mut WeightSet, name: String, dims: &[usize], bound: f64, center: f64| {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| (center + rng.random_range(-bound..bound)) as f32)
            .collect();
        w.insert(
            name,
            ArrayD::from_shape_vec(IxDyn(dims), data).expect("dims match"),
        );
    };
    let (d, f, k) = (cfg.d_model, cfg.ffn_dim, cfg.kernel_size);
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    for tap in 0..3 {
        put(
            &mut w,
            format!("sub.conv1.w{tap}"),
            &[d, cfg.d_feat],
            fan(3 * cfg.d_feat),
            0.0,
        );
        put(
            &mut w,
            format!("sub.conv2.w{tap}"),
            &[d, d],
            fan(3 * d),
            0.0,
        );
    }
    put(&mut w, "sub.conv1.b".into(), &[d], fan(3 * cfg.d_feat), 0.0);
    put(&mut w, "sub.conv2.b".into(), &[d], fan(3 * d), 0.0);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        for ff in ["ff1", "ff2"] {
            put(&mut w, p(&format!("{ff}.ln.g")), &[d], 0.1, 1.0);
            put(&mut w, p(&format!("{ff}.ln.b")), &[d], 0.1, 0.0);
            put(&mut w, p(&format!("{ff}.w1")), &[f, d], fan(d), 0.0);
            put(&mut w, p(&format!("{ff}.b1")), &[f], fan(d), 0.0);
            put(&mut w, p(&format!("{ff}.w2")), &[d, f], fan(f), 0.0);
            put(&mut w, p(&format!("{ff}.b2")), &[d], fan(f), 0.0);
        }
        put(&mut w, p("att.ln.g"), &[d], 0.1, 1.0);
        put(&mut w, p("att.ln.b"), &[d], 0.1, 0.0);
        for m in ["w_q", "w_k", "w_v", "w_r", "w_o"] {
            put(&mut w, p(&format!("att.{m}")), &[d, d], fan(d), 0.0);
        }
        put(&mut w, p("att.u"), &[d], fan(d / cfg.heads), 0.0);
        put(&mut w, p("att.v"), &[d], fan(d / cfg.heads), 0.0);
        put(&mut w, p("conv.ln.g"), &[d], 0.1, 1.0);
        put(&mut w, p("conv.ln.b"), &[d], 0.1, 0.0);
        put(&mut w, p("conv.pw1.w"), &[2 * d, d], fan(d), 0.0);
        put(&mut w, p("conv.pw1.b"), &[2 * d], fan(d), 0.0);
        put(&mut w, p("conv.dw.w"), &[d, k], fan(k), 0.0);
        put(&mut w, p("conv.dw.b"), &[d], fan(k), 0.0);
        put(&mut w, p("conv.norm.g"), &[d], 0.1, 1.0);
        put(&mut w, p("conv.norm.b"), &[d], 0.1, 0.0);
        put(&mut w, p("conv.pw2.w"), &[d, d], fan(d), 0.0);
        put(&mut w, p("conv.pw2.b"), &[d], fan(d), 0.0);
        put(&mut w, p("out_ln.g"), &[d], 0.1, 1.0);
        put(&mut w, p("out_ln.b"), &[d], 0.1, 0.0);
    }
    put(&mut w, "head.w".into(), &[cfg.vocab_size, d], fan(d), 0.0);
    put(&mut w, "head.b".into(), &[cfg.vocab_size], fan(d), 0.0);
    Ok(w)
}

fn mat<T: Real>(w: &WeightSet, name: &str, rows: usize, cols: usize) -> Result<Array2<T>> {
    let t = w.expect(name, &[rows, cols])?;
    Ok(Array2::from_shape_fn((rows, cols), |(i, j)| {
        T::from_f64(t[[i, j]] as f64)
    }))
}

fn vector<T: Real>(w: &WeightSet, name: &str, len: usize) -> Result<Array1<T>> {
    let t = w.expect(name, &[len])?;
    Ok(t.iter().map(|&v| T::from_f64(v as f64)).collect())
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[derive(Debug, Clone)]
struct Linear<T> {
    w: Array2<T>,
    b: Array1<T>,
}

impl<T: Real> Linear<T> {
    fn load(w: &WeightSet, name: &str, out: usize, inp: usize) -> Result<Self> {
        Ok(Self {
            w: mat(w, &format!("{name}.w"), out, inp)?,
            b: vector(w, &format!("{name}.b"), out)?,
        })
    }

    fn apply(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.w.t()) + &self.b
    }
}

#[derive(Debug, Clone)]
struct LayerNorm<T> {
    g: Array1<T>,
    b: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    fn load(w: &WeightSet, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            g: vector(w, &format!("{name}.g"), d)?,
            b: vector(w, &format!("{name}.b"), d)?,
        })
    }

    fn apply(&self, x: ArrayView2<T>) -> Array2<T> {
        let n = T::from_f64(x.ncols() as f64);
        let eps = T::from_f64(LN_EPS);
        let mut y = x.to_owned();
        for mut row in y.outer_iter_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for ((v, &g), &b) in row.iter_mut().zip(&self.g).zip(&self.b) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        y
    }
}

#[derive(Debug, Clone)]
struct FeedForward<T> {
    ln: LayerNorm<T>,
    w1: Linear<T>,
    w2: Linear<T>,
}

impl<T: Real> FeedForward<T> {
    fn load(w: &WeightSet, name: &str, d: usize, f: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::load(w, &format!("{name}.ln"), d)?,
            w1: Linear {
                w: mat(w, &format!("{name}.w1"), f, d)?,
                b: vector(w, &format!("{name}.b1"), f)?,
            },
            w2: Linear {
                w: mat(w, &format!("{name}.w2"), d, f)?,
                b: vector(w, &format!("{name}.b2"), d)?,
            },
        })
    }

    fn apply(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut h = self.w1.apply(self.ln.apply(x).view());
        h.mapv_inplace(|v| v * sigmoid(v));
        self.w2.apply(h.view())
    }
}

#[derive(Debug, Clone)]
struct ConvModule<T> {
    ln: LayerNorm<T>,
    pw1: Linear<T>,
    dw: DepthwiseKernel<T>,
    norm: LayerNorm<T>,
    pw2: Linear<T>,
}

impl<T: Real> ConvModule<T> {
    /// Everything before the depthwise convolution (frame-local).
    fn gated(&self, x: ArrayView2<T>) -> Array2<T> {
        let h = self.pw1.apply(self.ln.apply(x).view());
        let d = h.ncols() / 2;
        let mut g = h.slice(s![.., ..d]).to_owned();
        g.zip_mut_with(&h.slice(s![.., d..]), |a, &b| *a *= sigmoid(b));
        g
    }

    /// Everything after the depthwise convolution (frame-local).
    fn finish(&self, y: ArrayView2<T>) -> Array2<T> {
        let mut h = self.norm.apply(y);
        h.mapv_inplace(|v| v * sigmoid(v));
        self.pw2.apply(h.view())
    }
}

#[derive(Debug, Clone)]
struct Block<T> {
    ff1: FeedForward<T>,
    att_ln: LayerNorm<T>,
    att: AttentionParams<T>,
    conv: ConvModule<T>,
    ff2: FeedForward<T>,
    out_ln: LayerNorm<T>,
}

/// Token layout for an offline forward: token positions (global frames), the
/// attention mask between tokens and, per token, the source token of every
/// depthwise tap (`None` reads zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub positions: Vec<i64>,
    pub mask: AttnMask,
    pub taps: Vec<Vec<Option<usize>>>,
}

impl Geometry {
    /// One token per frame; taps reach `l_conv` frames left and up to the
    /// layout bound on the right.
    pub fn from_mask(mask: &AttnMask, layout: &ConvLayout, l_conv: usize) -> Result<Self> {
        let n = mask.rows();
        if mask.cols() != n || layout.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{}, conv layout over {} frames",
                mask.rows(),
                mask.cols(),
                layout.len()
            )));
        }
        let l = l_conv as i64;
        let taps = (0..n)
            .map(|m| {
                (-l..=l)
                    .map(|d| {
                        let src = m as i64 + d;
                        (src >= 0 && src < layout.bound(m) as i64).then_some(src as usize)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            positions: (0..n as i64).collect(),
            mask: mask.clone(),
            taps,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn distance_range(&self) -> (i64, i64) {
        let mut lo = 0;
        let mut hi = 0;
        for i in 0..self.len() {
            for j in 0..self.len() {
                if self.mask.allowed(i, j) {
                    let d = self.positions[i] - self.positions[j];
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
            }
        }
        (lo, hi)
    }
}

/// Encoder weights in precision `T`. Immutable once built; share via `Arc`.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    cfg: EncoderConfig,
    sub: Subsampler<T>,
    blocks: Vec<Block<T>>,
    head: Linear<T>,
}

impl<T: Real> Encoder<T> {
    pub fn from_weights(cfg: &EncoderConfig, w: &WeightSet) -> Result<Self> {
        cfg.validate()?;
        let (d, f, k) = (cfg.d_model, cfg.ffn_dim, cfg.kernel_size);
        let taps = |stage: &str, inp: usize| -> Result<[Array2<T>; 3]> {
            Ok([
                mat(w, &format!("sub.{stage}.w0"), d, inp)?,
                mat(w, &format!("sub.{stage}.w1"), d, inp)?,
                mat(w, &format!("sub.{stage}.w2"), d, inp)?,
            ])
        };
        let sub = Subsampler {
            stage1: taps("conv1", cfg.d_feat)?,
            bias1: vector(w, "sub.conv1.b", d)?,
            stage2: taps("conv2", d)?,
            bias2: vector(w, "sub.conv2.b", d)?,
        };
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = |s: &str| format!("layers.{l}.{s}");
                let att = AttentionParams {
                    w_q: mat(w, &p("att.w_q"), d, d)?,
                    w_k: mat(w, &p("att.w_k"), d, d)?,
                    w_v: mat(w, &p("att.w_v"), d, d)?,
                    w_r: mat(w, &p("att.w_r"), d, d)?,
                    w_o: mat(w, &p("att.w_o"), d, d)?,
                    u: vector(w, &p("att.u"), d)?,
                    v: vector(w, &p("att.v"), d)?,
                    heads: cfg.heads,
                };
                att.validate()?;
                Ok(Block {
                    ff1: FeedForward::load(w, &p("ff1"), d, f)?,
                    att_ln: LayerNorm::load(w, &p("att.ln"), d)?,
                    att,
                    conv: ConvModule {
                        ln: LayerNorm::load(w, &p("conv.ln"), d)?,
                        pw1: Linear::load(w, &p("conv.pw1"), 2 * d, d)?,
                        dw: DepthwiseKernel::new(
                            mat(w, &p("conv.dw.w"), d, k)?,
                            vector(w, &p("conv.dw.b"), d)?,
                        )?,
                        norm: LayerNorm::load(w, &p("conv.norm"), d)?,
                        pw2: Linear::load(w, &p("conv.pw2"), d, d)?,
                    },
                    ff2: FeedForward::load(w, &p("ff2"), d, f)?,
                    out_ln: LayerNorm::load(w, &p("out_ln"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: *cfg,
            sub,
            blocks,
            head: Linear::load(w, "head", cfg.vocab_size, d)?,
        })
    }

    pub fn random(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        Self::from_weights(cfg, &random_weights(cfg, seed)?)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn subsampler(&self) -> &Subsampler<T> {
        &self.sub
    }

    /// Raw features to sub-sampled frames.
    pub fn subsample(&self, features: ArrayView2<T>) -> Result<Array2<T>> {
        self.sub.forward(features)
    }

    /// Attention parameters of layer `l`.
    pub fn attention_params(&self, l: usize) -> &AttentionParams<T> {
        &self.blocks[l].att
    }

    /// Offline forward from raw features: sub-sampling, then all blocks under
    /// `mask` and the convolution `layout`.
    pub fn forward_offline(
        &self,
        features: ArrayView2<T>,
        mask: &AttnMask,
        layout: &ConvLayout,
    ) -> Result<Array2<T>> {
        let frames = self.subsample(features)?;
        self.forward_frames(frames.view(), mask, layout)
    }

    /// Offline forward from already sub-sampled frames.
    pub fn forward_frames(
        &self,
        frames: ArrayView2<T>,
        mask: &AttnMask,
        layout: &ConvLayout,
    ) -> Result<Array2<T>> {
        if mask.rows() != frames.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "mask size {} but {} sub-sampled frames",
                mask.rows(),
                frames.nrows()
            )));
        }
        let geom = Geometry::from_mask(mask, layout, self.cfg.l_conv())?;
        self.forward_geometry(frames, &geom)
    }

    /// Offline forward over an explicit token geometry; `tokens` holds the
    /// block-0 input of every token.
    pub fn forward_geometry(&self, tokens: ArrayView2<T>, geom: &Geometry) -> Result<Array2<T>> {
        let n = geom.len();
        if tokens.dim() != (n, self.cfg.d_model) || geom.mask.rows() != n || geom.taps.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "tokens {:?} for a geometry of {n} tokens, d_model {}",
                tokens.dim(),
                self.cfg.d_model
            )));
        }
        if let Some(row) = geom.mask.first_empty_row() {
            return Err(Error::EmptyRow { row });
        }
        let (lo, hi) = geom.distance_range();
        let half = T::from_f64(0.5);
        let mut x = tokens.to_owned();
        for b in &self.blocks {
            let att = RelPosAttention::new(b.att.clone(), RelTable::new(lo, hi, self.cfg.d_model))?;
            let f = b.ff1.apply(x.view()) * half;
            x += &f;
            x = &x + &att.forward(b.att_ln.apply(x.view()).view(), &geom.positions, &geom.mask)?;
            let g = b.conv.gated(x.view());
            let mut y = Array2::zeros(g.dim());
            for (t, taps) in geom.taps.iter().enumerate() {
                let mut acc = b.conv.dw.bias.clone();
                for (k, src) in taps.iter().enumerate() {
                    if let Some(src) = *src {
                        acc.zip_mut_with(&(&b.conv.dw.weights.column(k) * &g.row(src)), |a, &v| {
                            *a += v
                        });
                    }
                }
                y.row_mut(t).assign(&acc);
            }
            x = &x + &b.conv.finish(y.view());
            let f = b.ff2.apply(x.view()) * half;
            x += &f;
            x = b.out_ln.apply(x.view());
        }
        Ok(self.head.apply(x.view()))
    }

    /// Streaming encoder for chunk geometry `tsca`.
    pub fn stream(self: &Arc<Self>, tsca: TscaConfig, mode: ConvMode) -> Result<EncoderStream<T>> {
        tsca.validate()?;
        let attns = self
            .blocks
            .iter()
            .map(|b| RelPosAttention::for_stream(b.att.clone(), &tsca))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderStream {
            enc: Arc::clone(self),
            attns: Arc::new(attns),
            tsca,
            mode,
            state: EncoderState::new(&self.cfg, &tsca),
        })
    }
}

/// Per-layer caches of a streaming encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T> {
    pub attn: AttnCache<T>,
    pub conv: ConvCache<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState<T> {
    pub layers: Vec<LayerCache<T>>,
    /// Global frame of the first row of the next step's window.
    pub offset: i64,
    pub steps: usize,
    /// Last `r` sub-sampled input frames, re-fed at the start of the next
    /// window.
    input_tail: Array2<T>,
}

impl<T: Real> EncoderState<T> {
    fn new(cfg: &EncoderConfig, tsca: &TscaConfig) -> Self {
        let o = tsca.initial_offset();
        Self {
            layers: (0..cfg.layers)
                .map(|_| LayerCache {
                    attn: AttnCache::new(tsca, cfg.d_model),
                    conv: ConvCache::new(cfg.l_conv(), cfg.d_model, o),
                })
                .collect(),
            offset: o,
            steps: 0,
            input_tail: Array2::zeros((tsca.r, cfg.d_model)),
        }
    }
}

/// Output of one streaming step. Rows of `finals` cover global frames
/// `[final_start, final_start + finals.nrows())`, provisional rows follow.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub offset: i64,
    pub final_start: i64,
    pub finals: Array2<T>,
    pub provisional: Array2<T>,
}

impl<T> StepOutput<T> {
    pub fn provisional_start(&self) -> i64 {
        self.final_start + self.finals.nrows() as i64
    }
}

/// One encoder session: shared weights plus single-owner caches.
#[derive(Debug, Clone)]
pub struct EncoderStream<T> {
    enc: Arc<Encoder<T>>,
    attns: Arc<Vec<RelPosAttention<T>>>,
    tsca: TscaConfig,
    mode: ConvMode,
    state: EncoderState<T>,
}

impl<T: Real> EncoderStream<T> {
    pub fn tsca(&self) -> &TscaConfig {
        &self.tsca
    }

    pub fn mode(&self) -> ConvMode {
        self.mode
    }

    pub fn encoder(&self) -> &Arc<Encoder<T>> {
        &self.enc
    }

    pub fn state(&self) -> &EncoderState<T> {
        &self.state
    }

    /// Mutable caches, for fault-injection checks.
    pub fn state_mut(&mut self) -> &mut EncoderState<T> {
        &mut self.state
    }

    pub fn attention(&self, layer: usize) -> &RelPosAttention<T> {
        &self.attns[layer]
    }

    /// Fresh session sharing this stream's weights.
    pub fn fresh(&self) -> Self {
        Self {
            state: EncoderState::new(&self.enc.cfg, &self.tsca),
            ..self.clone()
        }
    }

    /// Runs one step on `chunk` (`c` sub-sampled frames, of which the first
    /// `valid` are real). On the `last` step every real window frame is
    /// final.
    pub fn forward_step(
        &mut self,
        chunk: ArrayView2<T>,
        valid: usize,
        last: bool,
    ) -> Result<StepOutput<T>> {
        let TscaConfig { c, r, .. } = self.tsca;
        let d = self.enc.cfg.d_model;
        if chunk.nrows() != c || chunk.ncols() != d {
            return Err(Error::ChunkSizeMismatch {
                expected: c,
                got: chunk.nrows(),
            });
        }
        if valid > c || (valid < c && !last) {
            return Err(Error::InvalidConfig(format!(
                "{valid} valid frames in a chunk of {c}"
            )));
        }
        let o = self.state.offset;
        let l_conv = self.enc.cfg.l_conv() as i64;
        for lc in &self.state.layers {
            if lc.conv.position != o - l_conv {
                return Err(Error::CacheDesync {
                    expected: o - l_conv,
                    actual: lc.conv.position,
                });
            }
        }
        let w = c + r;
        let valid_end = if last {
            o + (r + valid) as i64
        } else {
            o + w as i64
        };
        let real_rows = (valid_end - o).clamp(0, w as i64) as usize;
        let lookahead = self.mode.lookahead(r, self.enc.cfg.l_conv());
        let bound = |m: usize| {
            let b = if m < c { c + lookahead } else { w };
            b.min(real_rows)
        };

        let mut input =
            concatenate(Axis(0), &[self.state.input_tail.view(), chunk]).expect("same width");
        if real_rows < w {
            input.slice_mut(s![real_rows.., ..]).fill(T::zero());
        }
        let half = T::from_f64(0.5);
        let mut x = input.clone();
        for ((b, att), lc) in self
            .enc
            .blocks
            .iter()
            .zip(self.attns.iter())
            .zip(&mut self.state.layers)
        {
            let f = b.ff1.apply(x.view()) * half;
            x += &f;
            let a = att.forward_window(
                b.att_ln.apply(x.view()).view(),
                o,
                &self.tsca,
                valid_end,
                &mut lc.attn,
            )?;
            x = &x + &a;
            let g = b.conv.gated(x.view());
            let y = conv_window(&lc.conv, g.view(), &b.conv.dw, bound);
            lc.conv.advance(g.view(), c);
            x = &x + &b.conv.finish(y.view());
            let f = b.ff2.apply(x.view()) * half;
            x += &f;
            x = b.out_ln.apply(x.view());
        }
        let logits = self.enc.head.apply(x.view());

        let skip = (-o).clamp(0, w as i64) as usize;
        let final_end = if last { real_rows } else { c };
        let finals = logits
            .slice(s![skip.min(final_end)..final_end, ..])
            .to_owned();
        let provisional = if last {
            Array2::zeros((0, logits.ncols()))
        } else {
            logits.slice(s![c.., ..]).to_owned()
        };
        self.state.input_tail = input.slice(s![c.., ..]).to_owned();
        self.state.offset += c as i64;
        self.state.steps += 1;
        Ok(StepOutput {
            offset: o,
            final_start: o.max(0),
            finals,
            provisional,
        })
    }
}

/// Index of the first maximum of each row.
pub fn argmax_path<T: Real>(logits: ArrayView2<T>) -> Vec<u32> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Collapses a label path continuing from label `prev` (use [`BLANK`] at the
/// start); returns the emitted tokens and the last label.
pub fn ctc_collapse(path: &[u32], prev: u32) -> (Vec<u32>, u32) {
    let mut out = Vec::new();
    let mut last = prev;
    for &p in path {
        if p != BLANK && p != last {
            out.push(p);
        }
        last = p;
    }
    (out, last)
}

/// Greedy CTC decode: per-frame argmax, merge repeats, drop blanks.
pub fn ctc_greedy<T: Real>(logits: ArrayView2<T>) -> Vec<u32> {
    ctc_collapse(&argmax_path(logits), BLANK).0
}
