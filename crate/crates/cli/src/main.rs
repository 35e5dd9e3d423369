mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

/// Time-shifted streaming encoder toolkit.
#[derive(Parser, Debug)]
#[command(name = "tsca", version)]
struct Cli {
    /// Run configuration file (`key=value` per line).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a chunk or dynamic right-context attention mask.
    GenMask(GenMaskArgs),
    /// Stream feature files through the encoder and report latency.
    Simulate(SimulateArgs),
    /// Run a verification suite against its oracle.
    Verify(VerifyArgs),
    /// Percentile-bootstrap interval of the relative WER reduction of B over A.
    Bootstrap(BootstrapArgs),
    /// Per-step timing and window size for several (c, r) configurations.
    Bench(BenchArgs),
    /// Write a seeded synthetic feature file.
    MakeFeatures(MakeFeaturesArgs),
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskFormat {
    Txt,
    Pgm,
}

#[derive(Args, Debug)]
struct GenMaskArgs {
    #[arg(long)]
    size: usize,
    /// Left context (defaults to `l_att`).
    #[arg(long)]
    l: Option<usize>,
    /// Chunk size (defaults to `c`).
    #[arg(long)]
    c: Option<usize>,
    /// Right context; without it a plain chunk mask is written.
    #[arg(long)]
    r: Option<usize>,
    /// Extension probability (defaults to `p`).
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "txt")]
    format: MaskFormat,
    /// Output file; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Feature files; with --batch they are assigned to sessions round-robin.
    #[arg(long, num_args = 1..)]
    features: Vec<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long = "l-att")]
    l_att: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sessions stepped together.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Event log path; batch members get `.<i>` inserted before the extension.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Latency report path, indexed like --log.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// masks, attention, conv, e2e, grad, faults or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long)]
    precision: Option<tsca_core::Precision>,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    /// Score files of systems A and B: `errors<TAB>ref_words` per utterance.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    scores: Vec<PathBuf>,
    #[arg(long = "B", default_value_t = tsca_core::oracle::DEFAULT_B)]
    resamples: usize,
    #[arg(long, default_value_t = tsca_core::oracle::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated `c:r` pairs.
    #[arg(long, default_value = "10:6,16:0")]
    configs: String,
    /// Feature file; a synthetic one is generated if absent.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MakeFeaturesArgs {
    /// Number of raw frames.
    #[arg(long, default_value_t = 400)]
    frames: usize,
    /// Feature dimension (defaults to `d_feat`).
    #[arg(long = "d-feat")]
    d_feat: Option<usize>,
    #[arg(long = "frame-ms", default_value_t = 10.0)]
    frame_ms: f32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenMask(a) => commands::gen_mask(&cfg, a),
        Command::Simulate(a) => {
            if let Some(v) = a.c {
                cfg.c = v;
            }
            if let Some(v) = a.r {
                cfg.r = v;
            }
            if let Some(v) = a.l_att {
                cfg.context.l_att = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(v) = &a.weights {
                cfg.weights = Some(v.clone());
            }
            if let Some(v) = &a.tokens {
                cfg.tokens = Some(v.clone());
            }
            commands::simulate(&cfg, a)
        }
        Command::Verify(a) => {
            if let Some(p) = a.precision {
                cfg.encoder.precision = p;
            }
            commands::verify(&cfg, &a.suite, a.seeds)
        }
        Command::Bootstrap(a) => commands::bootstrap(&cfg, a),
        Command::Bench(a) => commands::bench(&cfg, a),
        Command::MakeFeatures(a) => commands::make_features(&cfg, a),
        Command::ShowConfig => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = commands::exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
