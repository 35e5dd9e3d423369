//! Named verification suites driving the oracles, for command-line and CI use.
//!
//! Every suite returns a list of [`CheckResult`]s; a suite passes when all of
//! its checks pass. The `faults` suite inverts the logic: each check injects a
//! defect and passes only if the matching oracle flags it.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cache_matches_inputs, RelPosAttention, RelTable, TscaConfig};
use crate::convolution::{dcc_forward, ConvLayout, ConvMode, DccStream, DepthwiseKernel};
use crate::encoder::{Encoder, EncoderConfig, EncoderStream};
use crate::error::{Error, Result};
use crate::masking::{chunk_mask, drc_mask};
use crate::oracle::{
    direct_attention, drc_mask_literal, fd_gradcheck, mask_statistics, offline_equivalence,
    random_matrix, random_params, EquivalenceReport,
};
use crate::real::{Precision, Real};
use crate::streaming::{run_stream, FixedCost, Recorder, StreamSession};

/// Left attention context used by the desk-scale suites.
pub const DESK_L_ATT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Masks,
    Attention,
    Conv,
    E2e,
    Grad,
    Faults,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Masks,
        Suite::Attention,
        Suite::Conv,
        Suite::E2e,
        Suite::Grad,
        Suite::Faults,
    ];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "masks" => Suite::Masks,
            "attention" => Suite::Attention,
            "conv" => Suite::Conv,
            "e2e" => Suite::E2e,
            "grad" => Suite::Grad,
            "faults" => Suite::Faults,
            other => return Err(Error::InvalidConfig(format!("unknown suite '{other}'"))),
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Masks => "masks",
            Suite::Attention => "attention",
            Suite::Conv => "conv",
            Suite::E2e => "e2e",
            Suite::Grad => "grad",
            Suite::Faults => "faults",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }

    fn from_report(name: impl Into<String>, rep: &EquivalenceReport) -> Self {
        Self::new(
            name,
            rep.pass,
            format!(
                "max_abs_diff={:e} frames={} tolerance={:e}",
                rep.max_abs_diff, rep.frames_compared, rep.tolerance
            ),
        )
    }

    /// `check=<name> pass=<bool> <detail>`
    pub fn to_line(&self) -> String {
        format!("check={} pass={} {}", self.name, self.pass, self.detail)
    }
}

pub fn all_pass(checks: &[CheckResult]) -> bool {
    checks.iter().all(|c| c.pass)
}

pub fn run_suite(suite: Suite, seeds: usize, precision: Precision) -> Result<Vec<CheckResult>> {
    if seeds == 0 {
        return Err(Error::InvalidConfig("seeds must be >= 1".into()));
    }
    match suite {
        Suite::Masks => masks(seeds),
        Suite::Attention => attention(seeds),
        Suite::Conv => conv(seeds),
        Suite::E2e => match precision {
            Precision::Double => e2e::<f64>(seeds),
            Precision::Single => e2e::<f32>(seeds),
        },
        Suite::Grad => grad(seeds),
        Suite::Faults => faults(),
    }
}

/// Streams `frames` through a fresh session and compares its final outputs
/// with the offline forward under the realized geometry.
pub fn stream_equivalence<T: Real>(
    enc: &Arc<Encoder<T>>,
    frames: ArrayView2<T>,
    c: usize,
    r: usize,
    l_att: usize,
    mode: ConvMode,
) -> Result<EquivalenceReport> {
    let mut s = recording_session(enc, c, r, l_att, mode)?;
    run_stream(&mut s, frames.mapv(Real::to_f64).view())?;
    let finals = s.model().final_logits();
    offline_equivalence(enc, frames, s.records(), c, r, l_att, mode, finals.view())
}

fn recording_session<T: Real>(
    enc: &Arc<Encoder<T>>,
    c: usize,
    r: usize,
    l_att: usize,
    mode: ConvMode,
) -> Result<StreamSession<Recorder<EncoderStream<T>>>> {
    let st = enc.stream(TscaConfig::new(c, r, l_att)?, mode)?;
    StreamSession::open(Recorder::new(st), 40.0, Box::new(FixedCost(0.0)))
}

fn masks(seeds: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut same, mut literal) = (0, 0);
    let tuples = 20 * seeds;
    for _ in 0..tuples {
        let size = rng.random_range(1..80);
        let c = rng.random_range(1..20);
        let r = rng.random_range(0..c);
        let l = rng.random_range(0..30);
        let p = rng.random_range(0.0..1.0);
        same += (drc_mask(size, l, c, r, 0.0, &mut rng)? == chunk_mask(size, l, c)?) as usize;
        let seed: u64 = rng.random();
        let ours = drc_mask(size, l, c, r, p, &mut ChaCha8Rng::seed_from_u64(seed))?;
        literal += (ours
            == drc_mask_literal(size, l, c, r, p, &mut ChaCha8Rng::seed_from_u64(seed)))
            as usize;
    }
    out.push(CheckResult::new(
        "p0_equals_chunk",
        same == tuples,
        format!("{same}/{tuples}"),
    ));
    out.push(CheckResult::new(
        "matches_literal",
        literal == tuples,
        format!("{literal}/{tuples}"),
    ));
    let seed_list: Vec<u64> = (0..seeds as u64).collect();
    let chunks = 10_000usize.div_ceil(seeds);
    for p in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let st = mask_statistics(p, 10, 6, &seed_list, chunks)?;
        let m2 = &st.consecutive[1];
        out.push(CheckResult::new(
            format!("stats_p{p}"),
            st.within(3.0),
            format!(
                "chunks={} rate={:.4} sigma={:.4} m2_rate={:.4} m2_expected={:.4}",
                st.chunks, st.extension_rate, st.sigma, m2.rate, m2.expected
            ),
        ));
    }
    Ok(out)
}

fn attention(seeds: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut worst = EquivalenceReport::compare(
        Array2::zeros((0, 0)).view(),
        Array2::zeros((0, 0)).view(),
        1e-10,
    );
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..40);
        let p = random_params(16, 2, seed);
        let x = random_matrix(n, 16, seed + 1000);
        let mask = drc_mask(n, 6, 4, 2, 0.5, &mut rng)?;
        let pos: Vec<i64> = (0..n as i64).collect();
        let attn = RelPosAttention::new(p.clone(), RelTable::new(-(n as i64), n as i64, 16))?;
        let rep = EquivalenceReport::compare(
            attn.forward(x.view(), &pos, &mask)?.view(),
            direct_attention(x.view(), &pos, &mask, &p)?.view(),
            1e-10,
        );
        if !rep.pass || rep.max_abs_diff >= worst.max_abs_diff {
            worst = rep;
        }
        if !worst.pass {
            break;
        }
    }
    out.push(CheckResult::from_report("offline_vs_direct", &worst));

    let enc = Arc::new(Encoder::<f64>::random(&EncoderConfig::default(), 7)?);
    let frames = random_matrix(10 * 10 * seeds, 64, 8);
    let mut s = recording_session(&enc, 10, 6, DESK_L_ATT, ConvMode::ChunkC)?;
    let mut exact = true;
    let mut steps = 0;
    for k in 0..10 * seeds {
        s.push_chunk(frames.slice(s![k * 10..(k + 1) * 10, ..]))?;
        let st = &s.model().inner;
        exact &= st
            .state()
            .layers
            .iter()
            .enumerate()
            .all(|(l, lc)| cache_matches_inputs(st.attention(l), &lc.attn));
        steps += 1;
    }
    out.push(CheckResult::new(
        "cache_bit_exact",
        exact,
        format!("steps={steps}"),
    ));
    Ok(out)
}

fn conv(seeds: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for width in [3usize, 15] {
        for mode in [ConvMode::ChunkC, ConvMode::ChunkCPlusR] {
            let mut worst = 0.0f64;
            let mut ok = true;
            for r in [0usize, 3, 6, 9] {
                for seed in 0..seeds as u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + width as u64 + r as u64);
                    let t = rng.random_range(1..90);
                    let x = random_matrix(t, 6, rng.random());
                    let kernel = DepthwiseKernel::<f64>::random(6, width, &mut rng);
                    let diff = conv_diff(x.view(), kernel, 10, r, mode, &mut rng)?;
                    ok &= diff <= 1e-12;
                    worst = worst.max(diff);
                }
            }
            out.push(CheckResult::new(
                format!("kernel{width}_{mode}"),
                ok,
                format!("max_abs_diff={worst:e} tolerance=1e-12"),
            ));
        }
    }
    Ok(out)
}

/// Streams `x` through a DCC stream in random-sized pushes and returns the
/// max deviation from the offline layout evaluation.
fn conv_diff<R: Rng>(
    x: ArrayView2<f64>,
    kernel: DepthwiseKernel<f64>,
    c: usize,
    r: usize,
    mode: ConvMode,
    rng: &mut R,
) -> Result<f64> {
    let (t, d) = x.dim();
    let layout = ConvLayout::new(t, c, r, kernel.l_conv(), mode);
    let want = dcc_forward(x, &layout, &kernel)?;
    let mut st = DccStream::new(kernel, c, r, mode);
    let mut got = Array2::zeros((0, d));
    let mut pos = 0;
    while pos < t {
        let n = rng.random_range(1..15).min(t - pos);
        got.append(Axis(0), st.push(x.slice(s![pos..pos + n, ..])).view())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        pos += n;
    }
    got.append(Axis(0), st.finish().view())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    if got.dim() != want.dim() {
        return Ok(f64::INFINITY);
    }
    Ok((&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

fn e2e<T: Real>(seeds: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for r in [0usize, 3, 6, 9] {
        for mode in [ConvMode::ChunkC, ConvMode::ChunkCPlusR] {
            let mut worst: Option<EquivalenceReport> = None;
            for seed in 0..seeds as u64 {
                let enc = Arc::new(Encoder::<T>::random(&EncoderConfig::default(), seed)?);
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * seed + r as u64);
                let t_raw = 4 * rng.random_range(25..70);
                let raw = random_matrix(t_raw, 80, rng.random()).mapv(T::from_f64);
                let frames = enc.subsample(raw.view())?;
                let rep = stream_equivalence(&enc, frames.view(), 10, r, DESK_L_ATT, mode)?;
                let replace = match &worst {
                    None => true,
                    Some(w) => w.pass && (!rep.pass || rep.max_abs_diff > w.max_abs_diff),
                };
                if replace {
                    worst = Some(rep);
                }
            }
            let worst = worst.expect("at least one seed");
            out.push(CheckResult::from_report(format!("c10_r{r}_{mode}"), &worst));
        }
    }
    Ok(out)
}

fn grad(seeds: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for seed in 0..seeds as u64 {
        let p = random_params(8, 2, seed);
        let x = random_matrix(7, 8, 50 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = drc_mask(7, 3, 3, 2, 0.5, &mut rng)?;
        let pos: Vec<i64> = (0..7).collect();
        let rep = fd_gradcheck(&p, x.view(), &pos, &mask, 1e-5)?;
        let worst = rep
            .tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .map(|g| g.name)
            .unwrap_or("-");
        out.push(CheckResult::new(
            format!("seed{seed}"),
            rep.pass,
            format!(
                "max_rel_error={:e} worst={worst} tolerance={:e}",
                rep.max_rel_error, rep.tolerance
            ),
        ));
    }
    Ok(out)
}

/// Each check injects one defect and passes when the oracle rejects it.
fn faults() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    // corrupted attention cache row
    let enc = Arc::new(Encoder::<f64>::random(&EncoderConfig::default(), 99)?);
    let frames = enc.subsample(random_matrix(160, 80, 5).view())?;
    let mut s = recording_session(&enc, 10, 6, DESK_L_ATT, ConvMode::ChunkC)?;
    s.push_chunk(frames.slice(s![..10, ..]))?;
    s.model_mut().inner.state_mut().layers[1].attn.keys_mut()[[DESK_L_ATT - 1, 0]] += 0.5;
    let rest = frames.slice(s![10.., ..]);
    let full = rest.nrows() / 10;
    for k in 0..full {
        s.push_chunk(rest.slice(s![k * 10..(k + 1) * 10, ..]))?;
    }
    s.finalize(rest.slice(s![full * 10.., ..]))?;
    let finals = s.model().final_logits();
    let rep = offline_equivalence(
        &enc,
        frames.view(),
        s.records(),
        10,
        6,
        DESK_L_ATT,
        ConvMode::ChunkC,
        finals.view(),
    )?;
    out.push(CheckResult::new(
        "cache_corruption",
        !rep.pass,
        format!("detected={} max_abs_diff={:e}", !rep.pass, rep.max_abs_diff),
    ));

    // attention weights perturbed on one side of the comparison
    let p = random_params(16, 2, 1);
    let x = random_matrix(20, 16, 2);
    let mask = chunk_mask(20, 6, 4)?;
    let pos: Vec<i64> = (0..20).collect();
    let mut bad = p.clone();
    bad.u[3] += 1e-3;
    let attn = RelPosAttention::new(bad, RelTable::new(-20, 20, 16))?;
    let rep = EquivalenceReport::compare(
        attn.forward(x.view(), &pos, &mask)?.view(),
        direct_attention(x.view(), &pos, &mask, &p)?.view(),
        1e-10,
    );
    out.push(CheckResult::new(
        "attention_bias",
        !rep.pass,
        format!("detected={} max_abs_diff={:e}", !rep.pass, rep.max_abs_diff),
    ));

    // dropped right-context extension
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let extended = drc_mask(40, 6, 5, 3, 1.0, &mut rng)?;
    let detected = extended != chunk_mask(40, 6, 5)?;
    out.push(CheckResult::new(
        "mask_extension",
        detected,
        format!("detected={detected}"),
    ));

    // streaming convolution with a perturbed tap
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_matrix(50, 6, 9);
    let kernel = DepthwiseKernel::<f64>::random(6, 15, &mut rng);
    let layout = ConvLayout::new(50, 10, 6, kernel.l_conv(), ConvMode::ChunkC);
    let want = dcc_forward(x.view(), &layout, &kernel)?;
    let mut bad = kernel.clone();
    bad.weights[[2, 0]] += 1e-3;
    let mut st = DccStream::new(bad, 10, 6, ConvMode::ChunkC);
    let mut got = st.push(x.view());
    got.append(Axis(0), st.finish().view())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let diff = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    out.push(CheckResult::new(
        "conv_tap",
        diff > 1e-12,
        format!("detected={} max_abs_diff={diff:e}", diff > 1e-12),
    ));

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn fast_suites_pass() {
        for suite in [Suite::Masks, Suite::Conv, Suite::Grad, Suite::Faults] {
            let checks = run_suite(suite, 1, Precision::Double).unwrap();
            assert!(all_pass(&checks), "{suite}: {checks:?}");
        }
        assert!(run_suite(Suite::Masks, 0, Precision::Double).is_err());
    }

    #[test]
    fn mask_suite_covers_p_sweep() {
        let names: Vec<String> = run_suite(Suite::Masks, 1, Precision::Double)
            .unwrap()
            .into_iter()
            .map(|c| c.name)
            .collect();
        for p in ["0", "0.25", "0.5", "0.75", "1"] {
            assert!(names.contains(&format!("stats_p{p}")), "{names:?}");
        }
    }
}
