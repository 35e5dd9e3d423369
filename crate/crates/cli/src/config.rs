//! Flat `key=value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use tsca_core::convolution::ConvMode;
use tsca_core::encoder::EncoderConfig;
use tsca_core::masking::ContextConfig;
use tsca_core::Precision;

/// Everything a command may need, loadable from a file and overridable from
/// flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub context: ContextConfig,
    pub encoder: EncoderConfig,
    /// Decoding chunk size.
    pub c: usize,
    /// Decoding right context.
    pub r: usize,
    pub conv_mode: ConvMode,
    pub seed: u64,
    pub features: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub tokens: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            context: ContextConfig::default(),
            encoder: EncoderConfig::default(),
            c: 10,
            r: 6,
            conv_mode: ConvMode::ChunkC,
            seed: 0,
            features: None,
            weights: None,
            tokens: None,
            out_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("bad value '{value}' for {key}: {e}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "c0" => self.context.c0 = parse(key, v)?,
            "r0" => self.context.r0 = parse(key, v)?,
            "n" => self.context.n = parse(key, v)?,
            "d_step" => self.context.d_step = parse(key, v)?,
            "p" => self.context.p = parse(key, v)?,
            "l_att" => self.context.l_att = parse(key, v)?,
            "kernel_size" => {
                self.context.kernel_size = parse(key, v)?;
                self.encoder.kernel_size = self.context.kernel_size;
            }
            "frame_ms" => self.context.frame_ms = parse(key, v)?,
            "layers" => self.encoder.layers = parse(key, v)?,
            "d_model" => self.encoder.d_model = parse(key, v)?,
            "heads" => self.encoder.heads = parse(key, v)?,
            "ffn_dim" => self.encoder.ffn_dim = parse(key, v)?,
            "vocab_size" => self.encoder.vocab_size = parse(key, v)?,
            "d_feat" => self.encoder.d_feat = parse(key, v)?,
            "precision" => self.encoder.precision = parse(key, v)?,
            "c" => self.c = parse(key, v)?,
            "r" => self.r = parse(key, v)?,
            "conv_mode" => self.conv_mode = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "features" => self.features = Some(v.into()),
            "weights" => self.weights = Some(v.into()),
            "tokens" => self.tokens = Some(v.into()),
            "out_dir" => self.out_dir = Some(v.into()),
            other => bail!("unknown configuration key '{other}'"),
        }
        Ok(())
    }

    /// Applies `key=value` lines over the current values. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value", i + 1))?;
            self.set(key.trim(), value)
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))?;
        Ok(cfg)
    }

    pub fn precision(&self) -> Precision {
        self.encoder.precision
    }

    pub fn validate(&self) -> Result<()> {
        self.context.validate()?;
        self.encoder.validate()?;
        if self.c == 0 {
            bail!("c must be >= 1");
        }
        if self.r >= self.c {
            bail!("r = {} must be smaller than c = {}", self.r, self.c);
        }
        Ok(())
    }

    /// Serializes every key, so a printed config can be loaded back.
    pub fn to_text(&self) -> String {
        let ctx = &self.context;
        let enc = &self.encoder;
        let mut lines = vec![
            format!("c0={}", ctx.c0),
            format!("r0={}", ctx.r0),
            format!("n={}", ctx.n),
            format!("d_step={}", ctx.d_step),
            format!("p={}", ctx.p),
            format!("l_att={}", ctx.l_att),
            format!("kernel_size={}", ctx.kernel_size),
            format!("frame_ms={}", ctx.frame_ms),
            format!("layers={}", enc.layers),
            format!("d_model={}", enc.d_model),
            format!("heads={}", enc.heads),
            format!("ffn_dim={}", enc.ffn_dim),
            format!("vocab_size={}", enc.vocab_size),
            format!("d_feat={}", enc.d_feat),
            format!("precision={}", enc.precision),
            format!("c={}", self.c),
            format!("r={}", self.r),
            format!("conv_mode={}", self.conv_mode),
            format!("seed={}", self.seed),
        ];
        let paths = [
            ("features", &self.features),
            ("weights", &self.weights),
            ("tokens", &self.tokens),
            ("out_dir", &self.out_dir),
        ];
        for (k, v) in paths {
            if let Some(p) = v {
                lines.push(format!("{k}={}", p.display()));
            }
        }
        lines.join("\n") + "\n"
    }
}
