//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use tsca_core::attention::{cache_matches_inputs, TscaConfig};
use tsca_core::benchmark::{bench_config, to_csv, BenchRow};
use tsca_core::convolution::{dcc_forward, ConvLayout, ConvMode, DccStream, DepthwiseKernel};
use tsca_core::encoder::{Encoder, EncoderConfig};
use tsca_core::io::TokenTable;
use tsca_core::masking::{chunk_mask, context_ranges, drc_mask, ContextConfig};
use tsca_core::oracle::{
    bootstrap_ci, bootstrap_from_resamples, fd_gradcheck, mask_statistics, offline_equivalence,
    random_matrix, random_params, UttScore, DEFAULT_ALPHA, DEFAULT_B,
};
use tsca_core::streaming::{
    run_batch, run_stream, EmissionEvent, FixedCost, ScriptedModel, Status, StepModel,
    StreamSession,
};
use tsca_core::Error;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(
        elapsed < limit,
        format!("took {elapsed:?}, limit {limit:?}"),
    )
}

fn c1_context_ranges() -> Outcome {
    let t = Instant::now();
    let cfg = ContextConfig {
        c0: 10,
        r0: 0,
        n: 3,
        d_step: 3,
        ..ContextConfig::default()
    };
    let ranges = context_ranges(&cfg).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    check(
        ranges.chunk_sizes == [10, 13, 16, 19],
        format!("C = {:?}", ranges.chunk_sizes),
    )?;
    check(
        ranges.right_sizes == [0, 3, 6, 9],
        format!("R = {:?}", ranges.right_sizes),
    )?;
    within(elapsed, Duration::from_millis(1))?;
    Ok(format!(
        "C={:?} R={:?} in {elapsed:?}",
        ranges.chunk_sizes, ranges.right_sizes
    ))
}

fn c2_mask_degeneration() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let size = rng.random_range(1..80);
        let c = rng.random_range(1..20);
        let r = rng.random_range(0..c);
        let l = rng.random_range(0..30);
        let drc = drc_mask(size, l, c, r, 0.0, &mut rng).map_err(|e| e.to_string())?;
        let chunk = chunk_mask(size, l, c).map_err(|e| e.to_string())?;
        check(
            drc == chunk,
            format!("case {case}: size={size} l={l} c={c} r={r}"),
        )?;
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("100 tuples equal in {:?}", t.elapsed()))
}

fn c3_mask_statistics() -> Outcome {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let mut parts = Vec::new();
    for p in [0.25, 0.5, 0.75] {
        let st = mask_statistics(p, 10, 6, &seeds, 1000).map_err(|e| e.to_string())?;
        check(st.chunks == 10_000, format!("{} chunks", st.chunks))?;
        let ext_ok = (st.extension_rate - p).abs() <= 3.0 * st.sigma;
        let m2 = &st.consecutive[1];
        check(
            ext_ok && m2.within(3.0),
            format!(
                "p={p}: rate {} (σ {}), m=2 rate {} vs {} (σ {})",
                st.extension_rate, st.sigma, m2.rate, m2.expected, m2.sigma
            ),
        )?;
        parts.push(format!(
            "p={p}: {:.4}, m2 {:.4}",
            st.extension_rate, m2.rate
        ));
    }
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(parts.join("; "))
}

fn c4_streaming_equivalence() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut runs = 0;
    for seed in 0..20u64 {
        let enc = desk_encoder(seed);
        for r in [0, 3, 6, 9] {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * seed + r as u64);
            let t_raw = 4 * rng.random_range(25..70);
            let frames = enc
                .subsample(features(t_raw, 80, rng.random()).view())
                .map_err(|e| e.to_string())?;
            for mode in [ConvMode::ChunkC, ConvMode::ChunkCPlusR] {
                let rep = equivalence(&enc, &frames, 10, r, DESK_L_ATT, mode);
                check(
                    rep.pass,
                    format!(
                        "seed {seed} r={r} {mode:?}: max diff {:e}",
                        rep.max_abs_diff
                    ),
                )?;
                worst = worst.max(rep.max_abs_diff);
                runs += 1;
            }
        }
    }
    // the harness must notice a corrupted cache row
    let enc = desk_encoder(99);
    let frames = enc
        .subsample(features(160, 80, 5).view())
        .map_err(|e| e.to_string())?;
    let mut s = session(&enc, 10, 6, DESK_L_ATT, ConvMode::ChunkC);
    s.push_chunk(frames.slice(s![..10, ..]))
        .map_err(|e| e.to_string())?;
    s.model_mut().inner.state_mut().layers[1].attn.keys_mut()[[DESK_L_ATT - 1, 0]] += 0.5;
    let rest = frames.slice(s![10.., ..]);
    let full = rest.nrows() / 10;
    for k in 0..full {
        s.push_chunk(rest.slice(s![k * 10..(k + 1) * 10, ..]))
            .map_err(|e| e.to_string())?;
    }
    s.finalize(rest.slice(s![full * 10.., ..]))
        .map_err(|e| e.to_string())?;
    let finals = s.model().final_logits();
    let faulty = offline_equivalence(
        &enc,
        frames.view(),
        s.records(),
        10,
        6,
        DESK_L_ATT,
        ConvMode::ChunkC,
        finals.view(),
    )
    .map_err(|e| e.to_string())?;
    check(!faulty.pass, "corrupted cache went unnoticed")?;
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{runs} runs, max abs diff {worst:e} (tol 1e-10); corrupted cache diff {:e}; {:?}",
        faulty.max_abs_diff,
        t.elapsed()
    ))
}

fn c5_cache_bit_exact() -> Outcome {
    let enc = desk_encoder(5);
    let frames = enc
        .subsample(features(4 * 1000, 80, 6).view())
        .map_err(|e| e.to_string())?;
    let mut s = session(&enc, 10, 6, DESK_L_ATT, ConvMode::ChunkC);
    for k in 0..100 {
        s.push_chunk(frames.slice(s![k * 10..(k + 1) * 10, ..]))
            .map_err(|e| e.to_string())?;
        let st = &s.model().inner;
        for (l, lc) in st.state().layers.iter().enumerate() {
            check(
                cache_matches_inputs(st.attention(l), &lc.attn),
                format!("step {k} layer {l}"),
            )?;
        }
    }
    Ok("100 steps x 4 layers bit-identical".into())
}

fn c6_convolution() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for width in [3usize, 15] {
        for r in [0usize, 3, 6, 9] {
            for mode in [ConvMode::ChunkC, ConvMode::ChunkCPlusR] {
                for seed in 0..10u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + width as u64 + r as u64);
                    let t = rng.random_range(1..90);
                    let x = random_matrix(t, 6, rng.random());
                    let kernel = DepthwiseKernel::<f64>::random(6, width, &mut rng);
                    let layout = ConvLayout::new(t, 10, r, width / 2, mode);
                    let want =
                        dcc_forward(x.view(), &layout, &kernel).map_err(|e| e.to_string())?;
                    let mut st = DccStream::new(kernel, 10, r, mode);
                    let mut got = Array2::zeros((0, 6));
                    let mut pos = 0;
                    while pos < t {
                        let n = rng.random_range(1..15).min(t - pos);
                        got.append(Axis(0), st.push(x.slice(s![pos..pos + n, ..])).view())
                            .unwrap();
                        pos += n;
                    }
                    got.append(Axis(0), st.finish().view()).unwrap();
                    check(
                        got.dim() == want.dim(),
                        format!("shape {:?} vs {:?}", got.dim(), want.dim()),
                    )?;
                    let diff = (&got - &want).iter().fold(0.0f64, |m, d| m.max(d.abs()));
                    check(
                        diff <= 1e-12,
                        format!("kernel {width} r={r} {mode:?} seed {seed}: {diff:e}"),
                    )?;
                    if mode == ConvMode::ChunkCPlusR && width == 3 && r > 1 && t > 12 {
                        check(
                            layout.bound(0) == 11,
                            format!("r_min clamp: bound {}", layout.bound(0)),
                        )?;
                    }
                    worst = worst.max(diff);
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} cases, max diff {worst:e}"))
}

fn c7_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let p = random_params(8, 2, seed);
        let x = random_matrix(7, 8, 50 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = drc_mask(7, 3, 3, 2, 0.5, &mut rng).map_err(|e| e.to_string())?;
        let pos: Vec<i64> = (0..7).collect();
        let rep = fd_gradcheck(&p, x.view(), &pos, &mask, 1e-5).map_err(|e| e.to_string())?;
        for name in ["w_q", "w_k", "w_v", "w_r", "u", "v"] {
            check(
                rep.tensors.iter().any(|g| g.name == name),
                format!("{name} not checked"),
            )?;
        }
        check(rep.pass, format!("seed {seed}: {:?}", rep.tensors))?;
        worst = worst.max(rep.max_rel_error);
    }
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "max relative error {worst:e} (tol 1e-4) in {:?}",
        t.elapsed()
    ))
}

/// Checks one finished session's event log against the pipeline invariants.
fn audit<M: StepModel>(s: &StreamSession<M>, total: i64) -> Result<(), String> {
    let (c, r) = (s.chunk() as i64, s.right() as i64);
    for (k, rec) in s.records().iter().enumerate() {
        check(
            rec.offset == -r + k as i64 * c,
            format!("step {k} offset {}", rec.offset),
        )?;
    }
    let finals: Vec<&EmissionEvent> = s.events().iter().filter(|e| e.is_final()).collect();
    let mut next = 0;
    for e in &finals {
        check(
            e.start == next && e.end > e.start,
            format!("final range [{}, {}) after {next}", e.start, e.end),
        )?;
        next = e.end;
    }
    check(
        next == total,
        format!("finals cover [0, {next}) of {total}"),
    )?;
    let committed: Vec<u32> = finals
        .iter()
        .flat_map(|e| e.tokens.iter().copied())
        .collect();
    check(
        committed == s.committed(),
        "final tokens differ from committed transcript",
    )?;
    for p in s.events().iter().filter(|e| !e.is_final()) {
        check(p.end - p.start <= r, "provisional span longer than r")?;
        let covering: Vec<&&EmissionEvent> = finals
            .iter()
            .filter(|f| f.step == p.step + 1 && f.start <= p.start && p.end <= f.end)
            .collect();
        check(
            covering.len() == 1,
            format!(
                "provisional span at step {} covered {} times",
                p.step,
                covering.len()
            ),
        )?;
        let touching = finals
            .iter()
            .filter(|f| f.start < p.end && p.start < f.end)
            .count();
        check(touching == 1, "provisional span touched by several finals")?;
    }
    Ok(())
}

fn c8_pipeline() -> Outcome {
    // random scripted streams
    let mut revised = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(2..12);
        let r = rng.random_range(0..c);
        let total = rng.random_range(0..8 * c);
        let steps = total / c + 2;
        let script = (0..steps)
            .map(|_| {
                let fin = (0..c + r).map(|_| rng.random_range(0..4)).collect();
                let prov = (0..r).map(|_| rng.random_range(0..4)).collect();
                (fin, prov)
            })
            .collect();
        let mut s = StreamSession::open(
            ScriptedModel::new(c, r, 5, 4, script),
            40.0,
            Box::new(FixedCost(0.0)),
        )
        .map_err(|e| e.to_string())?;
        let frames = Array2::<f64>::zeros((total, 1));
        let full = total / c;
        let mut committed_hist = vec![Vec::new()];
        let mut displays = Vec::new();
        for k in 0..full {
            s.push_chunk(frames.slice(s![k * c..(k + 1) * c, ..]))
                .map_err(|e| e.to_string())?;
            committed_hist.push(s.committed().to_vec());
            displays.push(s.display());
        }
        s.finalize(frames.slice(s![full * c.., ..]))
            .map_err(|e| e.to_string())?;
        committed_hist.push(s.committed().to_vec());
        for w in committed_hist.windows(2) {
            check(
                w[1].starts_with(&w[0]),
                format!("seed {seed}: committed transcript changed"),
            )?;
        }
        for (k, d) in displays.iter().enumerate() {
            check(
                d.starts_with(&committed_hist[k + 1]),
                "display does not extend committed text",
            )?;
        }
        audit(&s, total as i64).map_err(|e| format!("seed {seed}: {e}"))?;
        revised += s
            .events()
            .iter()
            .filter(|e| e.status == Status::Revised)
            .count();
    }

    // same audit on the real encoder
    let enc = Arc::new(
        Encoder::<f64>::random(
            &EncoderConfig {
                layers: 2,
                d_model: 16,
                ffn_dim: 32,
                ..EncoderConfig::default()
            },
            3,
        )
        .map_err(|e| e.to_string())?,
    );
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = [0, 3, 6, 9][seed as usize % 4];
        let total = rng.random_range(0..60);
        let frames = random_matrix(total, 16, seed);
        let mut s = session(&enc, 10, r, DESK_L_ATT, ConvMode::ChunkC);
        run_stream(&mut s, frames.view()).map_err(|e| e.to_string())?;
        audit(&s, total as i64).map_err(|e| format!("encoder seed {seed}: {e}"))?;
    }

    // scripted display sequence
    let table =
        TokenTable::parse("<blank>\n \nd\ne\nh\nl\no\nr\nw\n").map_err(|e| e.to_string())?;
    let ids = |s: &str| -> Vec<u32> {
        s.chars()
            .map(|ch| {
                if ch == '_' {
                    0
                } else {
                    table.id(&ch.to_string()).expect("known token")
                }
            })
            .collect()
    };
    let script = vec![
        (ids("hh_e__"), ids("lo_")),
        (ids("l_lo wor_"), ids("ld_")),
        (ids("ld_"), vec![]),
    ];
    let mut s = StreamSession::open(
        ScriptedModel::new(9, 3, 5, 9, script),
        40.0,
        Box::new(FixedCost(0.0)),
    )
    .map_err(|e| e.to_string())?;
    let mut shown: Vec<String> = Vec::new();
    let blank = Array2::<f64>::zeros((9, 1));
    for _ in 0..2 {
        s.push_chunk(blank.view()).map_err(|e| e.to_string())?;
        shown.push(table.render(&s.display()));
    }
    s.finalize(blank.slice(s![..0, ..]))
        .map_err(|e| e.to_string())?;
    shown.push(table.render(&s.display()));
    shown.dedup();
    check(
        shown == ["helo", "hello world"],
        format!("display sequence {shown:?}"),
    )?;
    check(
        !shown.iter().any(|d| d == "he" || d == "hello wor"),
        "three-stage display seen",
    )?;
    check(
        s.events()
            .iter()
            .any(|e| e.step == 1 && e.status == Status::Revised),
        "step 2 final not marked revised",
    )?;
    Ok(format!(
        "1000 scripted + 20 encoder streams audited ({revised} revisions); displays {shown:?}"
    ))
}

fn c9_batch() -> Outcome {
    let enc = desk_encoder(9);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = [0, 3, 6, 9][seed as usize % 4];
        let template = enc
            .stream(
                TscaConfig::new(10, r, DESK_L_ATT).unwrap(),
                ConvMode::ChunkC,
            )
            .unwrap();
        let streams: Vec<Array2<f64>> = (0..8)
            .map(|i| random_matrix(rng.random_range(0..70), 64, 100 * seed + i))
            .collect();
        let solo: Vec<Vec<EmissionEvent>> = streams
            .iter()
            .map(|x| {
                let mut s =
                    StreamSession::open(template.fresh(), 40.0, Box::new(FixedCost(2.0))).unwrap();
                run_stream(&mut s, x.view()).unwrap()
            })
            .collect();
        let mut sessions: Vec<_> = (0..8)
            .map(|_| StreamSession::open(template.fresh(), 40.0, Box::new(FixedCost(2.0))).unwrap())
            .collect();
        let views: Vec<_> = streams.iter().map(|x| x.view()).collect();
        let batch = run_batch(&mut sessions, &views).map_err(|e| e.to_string())?;
        for (i, (a, b)) in solo.iter().zip(&batch).enumerate() {
            let text = |v: &[EmissionEvent]| {
                v.iter()
                    .map(|e| e.to_log_line())
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            check(
                a == b && text(a) == text(b),
                format!("seed {seed} session {i} differs"),
            )?;
        }
    }
    let a = StreamSession::open(
        enc.stream(
            TscaConfig::new(10, 3, DESK_L_ATT).unwrap(),
            ConvMode::ChunkC,
        )
        .unwrap(),
        40.0,
        Box::new(FixedCost(0.0)),
    )
    .unwrap();
    let b = StreamSession::open(
        enc.stream(
            TscaConfig::new(10, 6, DESK_L_ATT).unwrap(),
            ConvMode::ChunkC,
        )
        .unwrap(),
        40.0,
        Box::new(FixedCost(0.0)),
    )
    .unwrap();
    let x = Array2::zeros((10, 64));
    let err = run_batch(&mut [a, b], &[x.view(), x.view()]);
    check(
        matches!(err, Err(Error::HeterogeneousConfig(_))),
        "mixed (c, r) batch accepted",
    )?;
    Ok("20 seeds x 8 sessions bit-identical to solo runs".into())
}

fn c10_window_parity() -> Outcome {
    let enc = desk_encoder(10);
    let frames = random_matrix(160, 64, 1);
    let mut rows = Vec::new();
    for (c, r) in [(10, 6), (16, 0)] {
        rows.push(
            bench_config(
                &enc,
                c,
                r,
                DESK_L_ATT,
                ConvMode::ChunkC,
                frames.view(),
                40.0,
                3,
                &|| Box::new(tsca_core::streaming::SystemClock::default()),
            )
            .map_err(|e| e.to_string())?,
        );
    }
    let csv = to_csv(&rows);
    let parsed: Vec<BenchRow> = csv
        .lines()
        .skip(1)
        .filter_map(BenchRow::parse_csv)
        .collect();
    check(parsed.len() == 2, "CSV rows missing")?;
    check(
        parsed[0].window == parsed[1].window && parsed[0].window == DESK_L_ATT + 16,
        format!("windows {} vs {}", parsed[0].window, parsed[1].window),
    )?;
    for row in &rows {
        let expect = row.mean_ms / (row.c as f64 * 40.0);
        check(
            (row.rtf - expect).abs() <= 1e-15 * expect.max(1.0),
            format!("rtf {} vs {expect}", row.rtf),
        )?;
    }
    let fixed = bench_config(
        &enc,
        10,
        6,
        DESK_L_ATT,
        ConvMode::ChunkC,
        frames.view(),
        40.0,
        1,
        &|| Box::new(FixedCost(3.0)),
    )
    .map_err(|e| e.to_string())?;
    check(
        fixed.rtf == 3.0 / 400.0,
        format!("fixed-cost rtf {}", fixed.rtf),
    )?;
    Ok(format!(
        "window {} for both; {}",
        parsed[0].window,
        csv.lines().skip(1).collect::<Vec<_>>().join(" | ")
    ))
}

fn c11_bootstrap() -> Outcome {
    check(
        DEFAULT_B == 5000 && DEFAULT_ALPHA == 0.05,
        "defaults changed",
    )?;
    let toy = [
        UttScore {
            errors_a: 2,
            errors_b: 1,
            ref_words: 10,
        },
        UttScore {
            errors_a: 4,
            errors_b: 4,
            ref_words: 10,
        },
    ];
    let all = vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]];
    let got = bootstrap_from_resamples(&toy, &all, 0.05).map_err(|e| e.to_string())?;
    // resample rWERR values sorted: 0, 1/6, 1/6, 1/2
    let lo = 0.15 * (1.0 / 6.0);
    let hi = 1.0 / 6.0 + 0.85 * (0.5 - 1.0 / 6.0);
    check(
        (got.mean - 1.0 / 6.0).abs() < 1e-15
            && (got.lo - lo).abs() < 1e-15
            && (got.hi - hi).abs() < 1e-15,
        format!("{got:?}, expected lo {lo} hi {hi}"),
    )?;
    let same: Vec<UttScore> = (0..20)
        .map(|i| UttScore {
            errors_a: 1 + i % 4,
            errors_b: 1 + i % 4,
            ref_words: 15,
        })
        .collect();
    let zero = bootstrap_ci(&same, DEFAULT_B, DEFAULT_ALPHA, 7).map_err(|e| e.to_string())?;
    check(
        (zero.mean, zero.lo, zero.hi) == (0.0, 0.0, 0.0),
        format!("identical systems: {zero:?}"),
    )?;
    Ok(format!(
        "toy interval [{:.4}, {:.4}]; identical systems {}",
        got.lo,
        got.hi,
        zero.display()
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("context ranges", c1_context_ranges),
        ("mask degeneration", c2_mask_degeneration),
        ("mask statistics", c3_mask_statistics),
        ("streaming/offline equivalence", c4_streaming_equivalence),
        ("cache bit-exactness", c5_cache_bit_exact),
        ("convolution equivalence", c6_convolution),
        ("gradient checks", c7_gradients),
        ("pipeline semantics", c8_pipeline),
        ("batch determinism", c9_batch),
        ("compute-window parity", c10_window_parity),
        ("bootstrap", c11_bootstrap),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
