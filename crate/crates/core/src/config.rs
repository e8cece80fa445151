//! Flat `key = value` run configuration with range checks, a resolved echo
//! and a hash over the fields that shape the stage-one model.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{Split, WindowSpec};
use crate::error::{HdtError, Result};
use crate::metrics::EvalOptions;
use crate::sampler::SamplerConfig;
use crate::series::DEFAULT_TREND_KERNEL;
use crate::transformer::{PriorConfig, SelfCondSource, Stage2Config};
use crate::vq::{Stage1Config, TokenizerConfig};

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "HDT_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub runs_dir: PathBuf,
    pub data: Option<PathBuf>,
    pub seed: u64,

    pub history: usize,
    pub horizon: usize,
    /// Length of the held-out tail; 0 means `10·horizon`.
    pub test_length: usize,
    pub train_stride: usize,
    /// 0 means `horizon` (non-overlapping test targets).
    pub test_stride: usize,

    pub code_dim: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub trend_kernel: usize,
    pub dropout: f64,
    pub disc_channels: usize,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage1_batch: usize,

    pub heads: usize,
    pub enc_layers: usize,
    pub base_layers: usize,
    pub selfcond_layers: usize,
    pub use_selfcond: bool,
    pub selfcond_source: SelfCondSource,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub stage2_lr: f64,
    pub stage2_batch: usize,
    pub checkpoint_every: usize,

    pub temperature: f64,
    pub samples: usize,
    pub missing_rate: f64,

    pub crps_normalize: bool,
    pub picp_low: f64,
    pub picp_high: f64,
    pub qice_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "default".into(),
            runs_dir: PathBuf::from("runs"),
            data: None,
            seed: 0,
            history: 96,
            horizon: 48,
            test_length: 0,
            train_stride: 1,
            test_stride: 0,
            code_dim: 64,
            codebook_size: 128,
            beta: 0.25,
            trend_kernel: DEFAULT_TREND_KERNEL,
            dropout: 0.1,
            disc_channels: 32,
            stage1_steps: 2000,
            stage1_lr: 1e-3,
            stage1_batch: 64,
            heads: 4,
            enc_layers: 2,
            base_layers: 3,
            selfcond_layers: 4,
            use_selfcond: true,
            selfcond_source: SelfCondSource::GroundTruth,
            phase1_steps: 2000,
            phase2_steps: 2000,
            stage2_lr: 1e-3,
            stage2_batch: 64,
            checkpoint_every: 0,
            temperature: 1.0,
            samples: 100,
            missing_rate: 0.0,
            crps_normalize: true,
            picp_low: 2.5,
            picp_high: 97.5,
            qice_bins: 10,
        }
    }
}

/// Keys hashed into the stage-one fingerprint.
const STAGE1_KEYS: [&str; 9] = [
    "horizon",
    "code_dim",
    "codebook_size",
    "beta",
    "trend_kernel",
    "dropout",
    "disc_channels",
    "stage1_steps",
    "stage1_lr",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HdtError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HdtError::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Defaults, with the seed taken from `HDT_SEED` when set.
    pub fn from_env() -> Result<Self> {
        let mut c = RunConfig::default();
        if let Ok(s) = std::env::var(SEED_ENV) {
            c.seed = parse(SEED_ENV, s.trim())?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "name" => self.name = v.to_string(),
            "runs_dir" => self.runs_dir = PathBuf::from(v),
            "data" => self.data = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "seed" => self.seed = parse(key, v)?,
            "history" => self.history = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "test_length" => self.test_length = parse(key, v)?,
            "train_stride" => self.train_stride = parse(key, v)?,
            "test_stride" => self.test_stride = parse(key, v)?,
            "code_dim" => self.code_dim = parse(key, v)?,
            "codebook_size" => self.codebook_size = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "trend_kernel" => self.trend_kernel = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "disc_channels" => self.disc_channels = parse(key, v)?,
            "stage1_steps" => self.stage1_steps = parse(key, v)?,
            "stage1_lr" => self.stage1_lr = parse(key, v)?,
            "stage1_batch" => self.stage1_batch = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "enc_layers" => self.enc_layers = parse(key, v)?,
            "base_layers" => self.base_layers = parse(key, v)?,
            "selfcond_layers" => self.selfcond_layers = parse(key, v)?,
            "use_selfcond" => self.use_selfcond = parse_bool(key, v)?,
            "selfcond_source" => self.selfcond_source = SelfCondSource::parse(v)?,
            "phase1_steps" => self.phase1_steps = parse(key, v)?,
            "phase2_steps" => self.phase2_steps = parse(key, v)?,
            "stage2_lr" => self.stage2_lr = parse(key, v)?,
            "stage2_batch" => self.stage2_batch = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "missing_rate" => self.missing_rate = parse(key, v)?,
            "crps_normalize" => self.crps_normalize = parse_bool(key, v)?,
            "picp_low" => self.picp_low = parse(key, v)?,
            "picp_high" => self.picp_high = parse(key, v)?,
            "qice_bins" => self.qice_bins = parse(key, v)?,
            other => return Err(HdtError::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HdtError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| HdtError::Config(format!("line {}: {}", i + 1, strip_kind(e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HdtError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every field, in a fixed order, as a config file that reproduces the run.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Path| p.display().to_string();
        vec![
            ("name", self.name.clone()),
            ("runs_dir", path(&self.runs_dir)),
            ("data", self.data.as_deref().map(path).unwrap_or_default()),
            ("seed", self.seed.to_string()),
            ("history", self.history.to_string()),
            ("horizon", self.horizon.to_string()),
            ("test_length", self.test_length.to_string()),
            ("train_stride", self.train_stride.to_string()),
            ("test_stride", self.test_stride.to_string()),
            ("code_dim", self.code_dim.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("beta", self.beta.to_string()),
            ("trend_kernel", self.trend_kernel.to_string()),
            ("dropout", self.dropout.to_string()),
            ("disc_channels", self.disc_channels.to_string()),
            ("stage1_steps", self.stage1_steps.to_string()),
            ("stage1_lr", self.stage1_lr.to_string()),
            ("stage1_batch", self.stage1_batch.to_string()),
            ("heads", self.heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("base_layers", self.base_layers.to_string()),
            ("selfcond_layers", self.selfcond_layers.to_string()),
            ("use_selfcond", self.use_selfcond.to_string()),
            ("selfcond_source", self.selfcond_source.as_str().to_string()),
            ("phase1_steps", self.phase1_steps.to_string()),
            ("phase2_steps", self.phase2_steps.to_string()),
            ("stage2_lr", self.stage2_lr.to_string()),
            ("stage2_batch", self.stage2_batch.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("temperature", self.temperature.to_string()),
            ("samples", self.samples.to_string()),
            ("missing_rate", self.missing_rate.to_string()),
            ("crps_normalize", self.crps_normalize.to_string()),
            ("picp_low", self.picp_low.to_string()),
            ("picp_high", self.picp_high.to_string()),
            ("qice_bins", self.qice_bins.to_string()),
        ]
    }

    pub fn echo(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Hex SHA-256 over the stage-one fields.
    pub fn stage1_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if STAGE1_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// The stage-one fields as checkpoint header pairs.
    pub fn stage1_fields(&self) -> Vec<(&'static str, String)> {
        self.entries().into_iter().filter(|(k, _)| STAGE1_KEYS.contains(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        fn range<T: PartialOrd + std::fmt::Display>(key: &str, v: T, lo: T, hi: T) -> Result<()> {
            if v < lo || v > hi {
                return Err(HdtError::Config(format!("{key} = {v} outside [{lo}, {hi}]")));
            }
            Ok(())
        }
        fn open_unit(key: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
            if !(v > lo && v <= hi) {
                return Err(HdtError::Config(format!("{key} = {v} outside ({lo}, {hi}]")));
            }
            Ok(())
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(HdtError::Config(format!("name {:?} must be a plain directory name", self.name)));
        }
        range("history", self.history, 1, 4096)?;
        range("horizon", self.horizon, 2, 1024)?;
        if self.horizon % 2 != 0 {
            return Err(HdtError::Config(format!("horizon = {} must be even", self.horizon)));
        }
        range("test_length", self.test_length, 0, 1 << 24)?;
        range("train_stride", self.train_stride, 1, 1 << 20)?;
        range("test_stride", self.test_stride, 0, 1 << 20)?;
        range("code_dim", self.code_dim, 4, 512)?;
        range("codebook_size", self.codebook_size, 2, 4096)?;
        open_unit("beta", self.beta, 0.0, 1.0)?;
        range("trend_kernel", self.trend_kernel, 1, 1024)?;
        range("dropout", self.dropout, 0.0, 0.9)?;
        range("disc_channels", self.disc_channels, 1, 1024)?;
        range("stage1_steps", self.stage1_steps, 1, 10_000_000)?;
        open_unit("stage1_lr", self.stage1_lr, 0.0, 1.0)?;
        range("stage1_batch", self.stage1_batch, 1, 4096)?;
        range("heads", self.heads, 1, 64)?;
        if self.code_dim % self.heads != 0 {
            return Err(HdtError::Config(format!(
                "code_dim = {} must be divisible by heads = {}",
                self.code_dim, self.heads
            )));
        }
        range("enc_layers", self.enc_layers, 1, 12)?;
        range("base_layers", self.base_layers, 1, 12)?;
        range("selfcond_layers", self.selfcond_layers, 1, 12)?;
        range("phase1_steps", self.phase1_steps, 0, 10_000_000)?;
        range("phase2_steps", self.phase2_steps, 0, 10_000_000)?;
        open_unit("stage2_lr", self.stage2_lr, 0.0, 1.0)?;
        range("stage2_batch", self.stage2_batch, 1, 4096)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(HdtError::Config(format!("temperature = {} must be positive", self.temperature)));
        }
        range("samples", self.samples, 1, 1_000_000)?;
        range("missing_rate", self.missing_rate, 0.0, 1.0)?;
        if !(0.0 < self.picp_low && self.picp_low < self.picp_high && self.picp_high < 100.0) {
            return Err(HdtError::Config(format!(
                "need 0 < picp_low < picp_high < 100, got {} and {}",
                self.picp_low, self.picp_high
            )));
        }
        range("qice_bins", self.qice_bins, 2, 1000)?;
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }

    pub fn test_tail(&self) -> usize {
        if self.test_length == 0 {
            10 * self.horizon
        } else {
            self.test_length
        }
    }

    pub fn window_spec(&self, split: Split) -> WindowSpec {
        let stride = match split {
            Split::Train => self.train_stride,
            Split::Test if self.test_stride == 0 => self.horizon,
            Split::Test => self.test_stride,
        };
        WindowSpec { history: self.history, horizon: self.horizon, stride, split }
    }

    pub fn tokenizer(&self, variates: usize) -> TokenizerConfig {
        let mut t = TokenizerConfig::new(variates, self.horizon, self.code_dim, self.codebook_size);
        t.beta = self.beta;
        t.dropout = self.dropout;
        t.disc_channels = self.disc_channels;
        t
    }

    pub fn stage1(&self, variates: usize) -> Stage1Config {
        let mut c = Stage1Config::new(self.tokenizer(variates), self.trend_kernel, self.stage1_steps, self.seed);
        c.lr = self.stage1_lr;
        c.batch_size = self.stage1_batch;
        c
    }

    pub fn prior(&self, variates: usize) -> PriorConfig {
        let mut p = PriorConfig::new(variates, self.history, self.horizon, self.code_dim, self.codebook_size);
        p.heads = self.heads;
        p.enc_layers = self.enc_layers;
        p.base_layers = self.base_layers;
        p.selfcond_layers = self.selfcond_layers;
        p.dropout = self.dropout;
        p.use_selfcond = self.use_selfcond;
        p
    }

    pub fn stage2(&self, variates: usize) -> Stage2Config {
        let mut c = Stage2Config::new(self.prior(variates), self.phase1_steps, self.phase2_steps, self.seed);
        c.lr = self.stage2_lr;
        c.batch_size = self.stage2_batch;
        c.selfcond_source = self.selfcond_source;
        c
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig::new(self.temperature, self.samples, self.seed)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            crps_normalize: self.crps_normalize,
            picp_low: self.picp_low,
            picp_high: self.picp_high,
            qice_bins: self.qice_bins,
        }
    }
}

fn strip_kind(e: HdtError) -> String {
    match e {
        HdtError::Config(m) => m,
        other => other.to_string(),
    }
}
