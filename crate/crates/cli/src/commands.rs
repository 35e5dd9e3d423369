use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsca_core::attention::TscaConfig;
use tsca_core::benchmark::{bench_config, to_csv};
use tsca_core::convolution::SUBSAMPLE_FACTOR;
use tsca_core::encoder::Encoder;
use tsca_core::io::{atomic_write, FeatureFile, TokenTable, WeightSet};
use tsca_core::masking::{chunk_mask, drc_mask};
use tsca_core::oracle::{bootstrap_ci, UttScore};
use tsca_core::streaming::{
    format_event_log, run_batch, run_stream, ComputeClock, EmissionEvent, StreamSession,
    SystemClock,
};
use tsca_core::suites::{all_pass, run_suite, Suite};
use tsca_core::{Error, Precision, Real};

use crate::config::RunConfig;
use crate::{BenchArgs, BootstrapArgs, GenMaskArgs, MakeFeaturesArgs, MaskFormat, SimulateArgs};

/// A check or invariant failed; maps to exit status 3.
#[derive(Debug)]
pub struct Breach(pub String);

impl fmt::Display for Breach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Breach {}

/// 3 for failed checks and internal invariant breaches, 2 for everything
/// else (bad flags, configs or input files).
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Breach>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidOffset { .. }
                | Error::DistanceOutOfTable { .. }
                | Error::EmptyRow { .. }
                | Error::CacheDesync { .. }
                | Error::SessionClosed
                | Error::SessionOpen => 3,
                _ => 2,
            };
        }
    }
    2
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => {
            atomic_write(path, bytes).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

/// `dir/events.log` → `dir/events.3.log` for batch member 3.
fn indexed(path: &Path, i: usize, n: usize) -> PathBuf {
    if n == 1 {
        return path.to_path_buf();
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{i}"),
    };
    path.with_file_name(name)
}

pub fn gen_mask(cfg: &RunConfig, a: GenMaskArgs) -> Result<()> {
    let l = a.l.unwrap_or(cfg.context.l_att);
    let c = a.c.unwrap_or(cfg.c);
    let mask = match a.r {
        None => chunk_mask(a.size, l, c)?,
        Some(r) => {
            let p = a.p.unwrap_or(cfg.context.p);
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(cfg.seed));
            drc_mask(a.size, l, c, r, p, &mut rng)?
        }
    };
    let text = match a.format {
        MaskFormat::Txt => mask.to_text(),
        MaskFormat::Pgm => mask.to_pgm(),
    };
    emit(a.out.as_deref(), text.as_bytes())
}

fn load_encoder<T: Real>(cfg: &RunConfig) -> Result<Encoder<T>> {
    cfg.validate()?;
    match &cfg.weights {
        Some(path) => {
            let w = WeightSet::load(path)
                .with_context(|| format!("loading weights {}", path.display()))?;
            Ok(Encoder::from_weights(&cfg.encoder, &w)?)
        }
        None => {
            info!(
                "no weights given; using random weights from seed {}",
                cfg.seed
            );
            Ok(Encoder::random(&cfg.encoder, cfg.seed)?)
        }
    }
}

fn to_model_input<T: Real>(enc: &Encoder<T>, file: &FeatureFile) -> Result<Array2<f64>> {
    let cfg = enc.config();
    if file.data.ncols() != cfg.d_feat {
        bail!(
            "features have {} dims, encoder expects {}",
            file.data.ncols(),
            cfg.d_feat
        );
    }
    if file.data.nrows() < SUBSAMPLE_FACTOR {
        if file.data.nrows() > 0 {
            warn!(
                "{} feature frames yield no encoder frame",
                file.data.nrows()
            );
        }
        return Ok(Array2::zeros((0, cfg.d_model)));
    }
    let raw = file.data.mapv(|v| T::from_f64(v as f64));
    Ok(enc.subsample(raw.view())?.mapv(Real::to_f64))
}

/// One line per step: the committed text followed by the provisional text
/// in brackets.
pub fn render_progress(events: &[EmissionEvent], table: &TokenTable) -> Vec<String> {
    let mut lines = Vec::new();
    let mut committed: Vec<u32> = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let step = events[i].step;
        let mut provisional: &[u32] = &[];
        while i < events.len() && events[i].step == step {
            let e = &events[i];
            if e.is_final() {
                committed.extend_from_slice(&e.tokens);
            } else {
                provisional = &e.tokens;
            }
            i += 1;
        }
        let mut line = table.render(&committed);
        if !provisional.is_empty() {
            line.push('[');
            line.push_str(&table.render(provisional));
            line.push(']');
        }
        lines.push(line);
    }
    lines
}

pub fn simulate(cfg: &RunConfig, a: SimulateArgs) -> Result<()> {
    if a.batch == 0 {
        bail!("--batch must be >= 1");
    }
    let paths: Vec<PathBuf> = if a.features.is_empty() {
        cfg.features.iter().cloned().collect()
    } else {
        a.features.clone()
    };
    if paths.is_empty() {
        bail!("no feature file given (--features or features= in the config)");
    }
    let files = paths
        .iter()
        .map(|p| FeatureFile::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let table = match &cfg.tokens {
        Some(p) => TokenTable::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TokenTable::synthetic(cfg.encoder.vocab_size),
    };
    if table.len() < cfg.encoder.vocab_size {
        bail!(
            "token table has {} entries, vocabulary needs {}",
            table.len(),
            cfg.encoder.vocab_size
        );
    }
    let logs = match cfg.precision() {
        Precision::Double => stream_files::<f64>(cfg, &files, a.batch)?,
        Precision::Single => stream_files::<f32>(cfg, &files, a.batch)?,
    };
    let out_dir = cfg.out_dir.as_deref();
    let log_path = a
        .log
        .clone()
        .or_else(|| out_dir.map(|d| d.join("events.log")));
    let report_path = a
        .report
        .clone()
        .or_else(|| out_dir.map(|d| d.join("report.txt")));
    let n = logs.len();
    let mut stdout = String::new();
    for (i, (events, report)) in logs.iter().enumerate() {
        for line in render_progress(events, &table) {
            if n > 1 {
                stdout.push_str(&format!("{i}\t"));
            }
            stdout.push_str(&line);
            stdout.push('\n');
        }
        if let Some(p) = &log_path {
            emit(Some(&indexed(p, i, n)), format_event_log(events).as_bytes())?;
        }
        if let Some(p) = &report_path {
            emit(Some(&indexed(p, i, n)), report.as_bytes())?;
        }
    }
    emit(None, stdout.as_bytes())
}

fn stream_files<T: Real>(
    cfg: &RunConfig,
    files: &[FeatureFile],
    batch: usize,
) -> Result<Vec<(Vec<EmissionEvent>, String)>> {
    let enc = Arc::new(load_encoder::<T>(cfg)?);
    let template = enc.stream(
        TscaConfig::new(cfg.c, cfg.r, cfg.context.l_att)?,
        cfg.conv_mode,
    )?;
    let inputs = files
        .iter()
        .map(|f| to_model_input(&enc, f))
        .collect::<Result<Vec<_>>>()?;
    let mut sessions = (0..batch)
        .map(|i| {
            let frame_ms = files[i % files.len()].frame_ms as f64 * SUBSAMPLE_FACTOR as f64;
            StreamSession::open(template.fresh(), frame_ms, Box::new(SystemClock::default()))
        })
        .collect::<tsca_core::Result<Vec<_>>>()?;
    let logs = if batch == 1 {
        vec![run_stream(&mut sessions[0], inputs[0].view())?]
    } else {
        let views: Vec<_> = (0..batch)
            .map(|i| inputs[i % inputs.len()].view())
            .collect();
        run_batch(&mut sessions, &views)?
    };
    logs.into_iter()
        .zip(&sessions)
        .map(|(events, s)| Ok((events, s.latency_report()?.to_kv())))
        .collect()
}

pub fn verify(cfg: &RunConfig, suite: &str, seeds: usize) -> Result<()> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse()?]
    };
    let mut failed = Vec::new();
    let mut out = String::new();
    for s in suites {
        let checks = run_suite(s, seeds, cfg.precision())?;
        for c in &checks {
            out.push_str(&format!("suite={s} {}\n", c.to_line()));
        }
        let pass = all_pass(&checks);
        out.push_str(&format!("suite={s} pass={pass}\n"));
        if !pass {
            failed.push(s.to_string());
        }
    }
    emit(None, out.as_bytes())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Breach(format!("failed suites: {}", failed.join(", "))).into())
    }
}

fn read_scores(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut it = line.split_whitespace();
            let mut field = |name: &str| -> Result<usize> {
                it.next()
                    .ok_or_else(|| anyhow!("{}:{}: missing {name}", path.display(), i + 1))?
                    .parse()
                    .with_context(|| format!("{}:{}: bad {name}", path.display(), i + 1))
            };
            let errors = field("errors")?;
            let words = field("ref_words")?;
            Ok((errors, words))
        })
        .collect()
}

pub fn bootstrap(cfg: &RunConfig, a: BootstrapArgs) -> Result<()> {
    let [pa, pb] = a.scores.as_slice() else {
        bail!("--scores expects two files");
    };
    let (sa, sb) = (read_scores(pa)?, read_scores(pb)?);
    if sa.len() != sb.len() {
        bail!("score files list {} and {} utterances", sa.len(), sb.len());
    }
    let scores = sa
        .iter()
        .zip(&sb)
        .enumerate()
        .map(|(i, (&(ea, wa), &(eb, wb)))| {
            if wa != wb {
                bail!(
                    "utterance {}: reference lengths {wa} and {wb} differ",
                    i + 1
                );
            }
            Ok(UttScore {
                errors_a: ea,
                errors_b: eb,
                ref_words: wa,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let res = bootstrap_ci(&scores, a.resamples, a.alpha, a.seed.unwrap_or(cfg.seed))?;
    emit(
        None,
        format!("rwerr={} lo={} hi={}\n", res.mean, res.lo, res.hi).as_bytes(),
    )
}

fn parse_pairs(list: &str) -> Result<Vec<(usize, usize)>> {
    list.split(',')
        .map(|item| {
            let (c, r) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| anyhow!("config '{item}' is not c:r"))?;
            Ok((c.trim().parse()?, r.trim().parse()?))
        })
        .collect()
}

pub fn bench(cfg: &RunConfig, a: BenchArgs) -> Result<()> {
    let pairs = parse_pairs(&a.configs).context("--configs")?;
    let file = match &a.features {
        Some(p) => FeatureFile::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => synthetic_features(640, cfg.encoder.d_feat, 10.0, cfg.seed),
    };
    let rows = match cfg.precision() {
        Precision::Double => bench_rows::<f64>(cfg, &file, &pairs, a.repeat)?,
        Precision::Single => bench_rows::<f32>(cfg, &file, &pairs, a.repeat)?,
    };
    emit(a.out.as_deref(), to_csv(&rows).as_bytes())
}

fn bench_rows<T: Real>(
    cfg: &RunConfig,
    file: &FeatureFile,
    pairs: &[(usize, usize)],
    repeat: usize,
) -> Result<Vec<tsca_core::benchmark::BenchRow>> {
    let enc = Arc::new(load_encoder::<T>(cfg)?);
    let frames = to_model_input(&enc, file)?;
    let frame_ms = file.frame_ms as f64 * SUBSAMPLE_FACTOR as f64;
    let clock = || -> Box<dyn ComputeClock> { Box::new(SystemClock::default()) };
    pairs
        .iter()
        .map(|&(c, r)| {
            bench_config(
                &enc,
                c,
                r,
                cfg.context.l_att,
                cfg.conv_mode,
                frames.view(),
                frame_ms,
                repeat,
                &clock,
            )
            .with_context(|| format!("config {c}:{r}"))
        })
        .collect()
}

/// Per-dimension mixture of three sinusoids plus uniform noise.
pub fn synthetic_features(frames: usize, d: usize, frame_ms: f32, seed: u64) -> FeatureFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps: Vec<[(f64, f64, f64); 3]> = (0..d)
        .map(|_| {
            [(); 3].map(|_| {
                (
                    rng.random_range(0.2..1.0),
                    rng.random_range(0.01..0.3),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
        })
        .collect();
    let data = Array2::from_shape_fn((frames, d), |(t, j)| {
        let s: f64 = comps[j]
            .iter()
            .map(|&(amp, freq, phase)| amp * (freq * t as f64 + phase).sin())
            .sum();
        (s + rng.random_range(-0.1..0.1)) as f32
    });
    FeatureFile { frame_ms, data }
}

pub fn make_features(cfg: &RunConfig, a: MakeFeaturesArgs) -> Result<()> {
    if a.frame_ms.is_nan() || a.frame_ms <= 0.0 {
        bail!("--frame-ms must be positive");
    }
    let d = a.d_feat.unwrap_or(cfg.encoder.d_feat);
    let file = synthetic_features(a.frames, d, a.frame_ms, a.seed.unwrap_or(cfg.seed));
    file.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsca_core::streaming::Status;

    fn event(step: usize, status: Status, tokens: Vec<u32>) -> EmissionEvent {
        EmissionEvent {
            step,
            status,
            start: 0,
            end: 1,
            wall_ms: 0.0,
            tokens,
        }
    }

    #[test]
    fn progress_brackets_provisional_text() {
        let table = TokenTable::synthetic(32);
        let events = vec![
            event(0, Status::Final, vec![9, 6]),
            event(0, Status::Provisional, vec![13]),
            event(1, Status::Revised, vec![13, 13, 16]),
        ];
        assert_eq!(render_progress(&events, &table), ["he[l]", "hello"]);
        assert!(render_progress(&[], &table).is_empty());
    }

    #[test]
    fn batch_paths() {
        assert_eq!(
            indexed(Path::new("out/ev.log"), 3, 8),
            Path::new("out/ev.3.log")
        );
        assert_eq!(indexed(Path::new("out/ev"), 0, 2), Path::new("out/ev.0"));
        assert_eq!(indexed(Path::new("ev.log"), 0, 1), Path::new("ev.log"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&anyhow::Error::new(Breach("x".into()))), 3);
        assert_eq!(exit_code(&anyhow::Error::new(Error::SessionClosed)), 3);
        assert_eq!(
            exit_code(&anyhow::Error::new(Error::Format("x".into())).context("loading")),
            2
        );
        assert_eq!(exit_code(&anyhow!("plain")), 2);
    }

    #[test]
    fn pairs() {
        assert_eq!(parse_pairs("10:6, 16:0").unwrap(), [(10, 6), (16, 0)]);
        assert!(parse_pairs("10").is_err());
    }

    #[test]
    fn synthetic_features_are_seeded() {
        let a = synthetic_features(20, 4, 10.0, 1);
        assert_eq!(a, synthetic_features(20, 4, 10.0, 1));
        assert_ne!(a, synthetic_features(20, 4, 10.0, 2));
        assert_eq!(a.data.dim(), (20, 4));
    }
}
