//! Command-line front end. Every command resolves a [`RunConfig`], echoes it
//! into `runs/<name>/config.echo`, and exits 0 on success, 2 on usage or
//! configuration problems and 3 on a numerical abort.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{load_csv, synth_sinusoid, write_csv, Dataset, Split, SynthSpec};
use crate::error::{HdtError, Result};
use crate::metrics::EvalReport;
use crate::pipeline::{forecast_windows, mask_windows, score, test_set, Forecaster, TestSet};
use crate::sampler::{ForecastDistribution, TEMPERATURE_GRID};
use crate::tensor::{Checkpoint, Tensor};
use crate::transformer::{
    prepare_continuous, prepare_stage2, train_continuous, train_stage2, ContinuousConfig, HdtPrior,
    Stage2Output,
};
use crate::vq::{train_stage1, CheckpointPolicy, Stage1Model};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Quantile levels written next to each forecast.
pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Parser, Debug)]
#[command(name = "hdt", version, about = "Hierarchical discrete transformer forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Wide CSV dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run name under the runs directory.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the target and trend tokenizers.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
    },
    /// Train the hierarchical prior on stage-one tokens.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        /// Stage-one checkpoint (default: the run directory's).
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Stop after the trend decoder.
        #[arg(long)]
        phase1_only: bool,
    },
    /// Sample forecasts for every test window.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_negative_numbers = true)]
        temperature: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        missing_rate: Option<f64>,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
    },
    /// Score forecast files against the test targets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory of `window_NNNN.csv` files (default: the run's).
        #[arg(long)]
        forecasts: Option<PathBuf>,
    },
    /// Train and score one ablation family side by side.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        variant: Variant,
    },
    /// Write a synthetic multi-sinusoid dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        variates: usize,
        #[arg(long, default_value_t = 2000)]
        length: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        trend: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        level: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    NoSelfcond,
    Continuous,
    TempSweep,
    LayerSweep,
}

impl Variant {
    fn label(self) -> &'static str {
        match self {
            Variant::NoSelfcond => "no-selfcond",
            Variant::Continuous => "continuous",
            Variant::TempSweep => "temp-sweep",
            Variant::LayerSweep => "layer-sweep",
        }
    }
}

pub fn exit_code(e: &HdtError) -> i32 {
    match e {
        HdtError::NumericalAbort { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::TrainStage1 { common } => cmd_train_stage1(&resolve(&common, |_| Ok(()))?),
        Command::TrainStage2 { common, stage1, phase1_only } => {
            cmd_train_stage2(&resolve(&common, |_| Ok(()))?, stage1.as_deref(), phase1_only)
        }
        Command::Forecast { common, temperature, samples, missing_rate, stage1, stage2 } => {
            let cfg = resolve(&common, |c| {
                if let Some(t) = temperature {
                    c.temperature = t;
                }
                if let Some(s) = samples {
                    c.samples = s;
                }
                if let Some(m) = missing_rate {
                    c.missing_rate = m;
                }
                Ok(())
            })?;
            cmd_forecast(&cfg, stage1.as_deref(), stage2.as_deref())
        }
        Command::Evaluate { common, forecasts } => cmd_evaluate(&resolve(&common, |_| Ok(()))?, forecasts.as_deref()),
        Command::Ablate { common, variant } => cmd_ablate(&resolve(&common, |_| Ok(()))?, variant),
        Command::Synth { out, variates, length, noise, trend, level, seed } => {
            let seed = match seed {
                Some(s) => s,
                None => RunConfig::from_env()?.seed,
            };
            let mut spec = SynthSpec::new(variates, length, seed);
            spec.noise_sigma = noise;
            spec.trend_scale = trend;
            spec.level = level;
            let ds = synth_sinusoid(&spec)?;
            ensure_parent(&out)?;
            write_csv(&ds, &out)?;
            println!("wrote {length}×{variates} synthetic series to {}", out.display());
            Ok(())
        }
    }
}

/// Defaults, then `HDT_SEED`, the config file, `--set` pairs, then flags.
fn resolve(common: &Common, extra: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_env()?;
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| HdtError::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    if let Some(n) = &common.name {
        cfg.name = n.clone();
    }
    if let Some(r) = &common.runs_dir {
        cfg.runs_dir = r.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    extra(&mut cfg)?;
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(dir.join("logs"))?;
    fs::write(dir.join("config.echo"), cfg.echo())?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| HdtError::Config("no dataset given (set data = <path> or pass --data)".into()))?;
    if !path.is_file() {
        return Err(HdtError::Config(format!("dataset {} does not exist", path.display())));
    }
    load_csv(path)?.with_test_tail(cfg.test_tail())
}

fn write_rows<const N: usize>(path: &Path, header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> HdtError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HdtError::Io(io),
        other => HdtError::Config(format!("CSV error: {other:?}")),
    }
}

fn stage1_path(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| cfg.run_dir().join("stage1.ckpt"), Path::to_path_buf)
}

fn stage2_path(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| cfg.run_dir().join("stage2.ckpt"), Path::to_path_buf)
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(HdtError::Config(format!("{what} checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

/// Names the first stage-one field on which the checkpoint and the
/// configuration disagree.
fn check_stage1(ck: &Checkpoint, cfg: &RunConfig, variates: usize) -> Result<()> {
    let mut expected = cfg.stage1_fields();
    expected.push(("variates", variates.to_string()));
    for (key, want) in expected {
        let have = ck.header_value(key)?;
        if have != want {
            return Err(HdtError::Config(format!(
                "stage-1 checkpoint has {key} = {have}, configuration has {want}"
            )));
        }
    }
    let hash = cfg.stage1_hash();
    if ck.header_value("config_hash")? != hash {
        return Err(HdtError::Config("stage-1 checkpoint config_hash does not match".into()));
    }
    Ok(())
}

fn check_stage2(ck: &Checkpoint, cfg: &RunConfig, variates: usize) -> Result<()> {
    let p = cfg.prior(variates);
    let expected = [
        ("variates", variates.to_string()),
        ("history", p.history.to_string()),
        ("horizon", p.horizon.to_string()),
        ("hidden", p.hidden.to_string()),
        ("target_codebook", p.target_codebook.to_string()),
        ("stage1_hash", cfg.stage1_hash()),
    ];
    for (key, want) in expected {
        let have = ck.header_value(key)?;
        if have != want {
            return Err(HdtError::Config(format!(
                "stage-2 checkpoint has {key} = {have}, configuration has {want}"
            )));
        }
    }
    Ok(())
}

fn stage1_header(cfg: &RunConfig) -> Vec<(String, String)> {
    let mut h: Vec<(String, String)> = cfg.stage1_fields().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    h.push(("config_hash".into(), cfg.stage1_hash()));
    h
}

pub fn cmd_train_stage1(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let train = crate::data::windows(&ds, &cfg.window_spec(Split::Train))?;
    let dir = cfg.run_dir();
    let policy = CheckpointPolicy {
        path: dir.join("stage1.ckpt"),
        every: cfg.checkpoint_every,
        header: stage1_header(cfg),
    };
    let out = train_stage1(&train, &cfg.stage1(ds.variates()), Some(&policy))?;
    for (name, log) in [("stage1_target.csv", &out.target_log), ("stage1_trend.csv", &out.trend_log)] {
        write_rows(&dir.join("logs").join(name), crate::vq::Stage1LogRow::HEADER, log.iter().map(|r| r.record()))?;
    }
    let last = out.target_log.last().expect("at least one step");
    println!(
        "stage 1: {} windows, {} steps, final reconstruction {:.6}; checkpoint {}",
        train.len(),
        cfg.stage1_steps,
        last.rec,
        policy.path.display()
    );
    Ok(())
}

fn load_stage1(cfg: &RunConfig, flag: Option<&Path>, variates: usize) -> Result<Stage1Model> {
    let ck = load_checkpoint(&stage1_path(cfg, flag), "stage-1")?;
    check_stage1(&ck, cfg, variates)?;
    Stage1Model::from_checkpoint(&ck)
}

fn run_stage2(cfg: &RunConfig, ds: &Dataset, stage1: &Stage1Model, policy: Option<&CheckpointPolicy>, phase1_only: bool) -> Result<Stage2Output> {
    let train = crate::data::windows(ds, &cfg.window_spec(Split::Train))?;
    let data = prepare_stage2(&train, stage1)?;
    let mut s2 = cfg.stage2(ds.variates());
    s2.phase1_only = phase1_only;
    train_stage2(&data, &s2, policy)
}

pub fn cmd_train_stage2(cfg: &RunConfig, stage1_flag: Option<&Path>, phase1_only: bool) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let stage1 = load_stage1(cfg, stage1_flag, ds.variates())?;
    let dir = cfg.run_dir();
    let policy = CheckpointPolicy {
        path: dir.join("stage2.ckpt"),
        every: cfg.checkpoint_every,
        header: vec![("stage1_hash".into(), cfg.stage1_hash())],
    };
    let out = run_stage2(cfg, &ds, &stage1, Some(&policy), phase1_only)?;
    write_rows(&dir.join("logs").join("stage2.csv"), crate::transformer::Stage2LogRow::HEADER, out.log.iter().map(|r| r.record()))?;
    let tail = |phase: u8| {
        out.log.iter().rev().find(|r| r.phase == phase).map_or_else(|| "-".to_string(), |r| format!("{:.4}", r.nll))
    };
    println!("stage 2: phase-1 nll {}, phase-2 nll {}; checkpoint {}", tail(1), tail(2), policy.path.display());
    Ok(())
}

fn load_test(cfg: &RunConfig, ds: &Dataset) -> Result<TestSet> {
    test_set(ds, &cfg.window_spec(Split::Test))
}

pub fn window_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("window_{i:04}.csv"))
}

fn quantile_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("window_{i:04}_quantiles.csv"))
}

pub fn write_forecast(path: &Path, dist: &ForecastDistribution) -> Result<()> {
    let (tau, d) = dist.path_shape()?;
    let rows = dist.samples.iter().enumerate().flat_map(|(p, s)| {
        (0..tau).flat_map(move |t| (0..d).map(move |v| [p.to_string(), t.to_string(), v.to_string(), s.at2(t, v).to_string()]))
    });
    write_rows(path, ["path", "t", "variate", "value"], rows)
}

fn write_quantiles(path: &Path, dist: &ForecastDistribution) -> Result<()> {
    let (tau, d) = dist.path_shape()?;
    let qs = dist.quantiles(&QUANTILE_LEVELS)?;
    let rows = QUANTILE_LEVELS.iter().zip(&qs).flat_map(|(l, q)| {
        (0..tau).flat_map(move |t| (0..d).map(move |v| [l.to_string(), t.to_string(), v.to_string(), q.at2(t, v).to_string()]))
    });
    write_rows(path, ["level", "t", "variate", "value"], rows)
}

/// Reads a `path,t,variate,value` file back into a distribution.
pub fn read_forecast(path: &Path) -> Result<ForecastDistribution> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = || HdtError::Ingestion {
            line: i + 2,
            column: None,
            message: format!("malformed forecast row in {}", path.display()),
        };
        if rec.len() != 4 {
            return Err(bad());
        }
        let idx = |k: usize| rec[k].parse::<usize>().map_err(|_| bad());
        cells.push((idx(0)?, idx(1)?, idx(2)?, rec[3].parse::<f64>().map_err(|_| bad())?));
    }
    let max = |f: fn(&(usize, usize, usize, f64)) -> usize| cells.iter().map(f).max().map_or(0, |m| m + 1);
    let (s, tau, d) = (max(|c| c.0), max(|c| c.1), max(|c| c.2));
    if cells.len() != s * tau * d {
        return Err(HdtError::Dimension(format!(
            "{} holds {} values, expected {s}×{tau}×{d}",
            path.display(),
            cells.len()
        )));
    }
    let mut samples = vec![Tensor::zeros(&[tau, d]); s];
    for (p, t, v, x) in cells {
        samples[p].data_mut()[t * d + v] = x;
    }
    ForecastDistribution::new(samples)
}

pub fn cmd_forecast(cfg: &RunConfig, stage1_flag: Option<&Path>, stage2_flag: Option<&Path>) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let stage1 = load_stage1(cfg, stage1_flag, ds.variates())?;
    let ck2 = load_checkpoint(&stage2_path(cfg, stage2_flag), "stage-2")?;
    check_stage2(&ck2, cfg, ds.variates())?;
    let prior = HdtPrior::from_checkpoint(&ck2)?;
    let test = load_test(cfg, &ds)?;
    let windows = mask_windows(&test.windows, cfg.missing_rate, cfg.seed)?;
    let forecasts = forecast_windows(&windows, &Forecaster::Hdt { stage1: &stage1, prior: &prior }, &cfg.sampler())?;
    let dir = cfg.run_dir().join("forecasts");
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    for (i, f) in forecasts.iter().enumerate() {
        write_forecast(&window_file(&dir, i), f)?;
        write_quantiles(&quantile_file(&dir, i), f)?;
    }
    println!(
        "forecast {} windows × {} samples at temperature {} into {}",
        forecasts.len(),
        cfg.samples,
        cfg.temperature,
        dir.display()
    );
    Ok(())
}

fn report_rows(prefix: &str, r: &EvalReport) -> Vec<[String; 2]> {
    [("crps_sum", r.crps_sum), ("nrmse_sum", r.nrmse_sum), ("picp", r.picp), ("qice", r.qice)]
        .into_iter()
        .map(|(k, v)| [format!("{prefix}{k}"), v.to_string()])
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig, forecast_dir: Option<&Path>) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let test = load_test(cfg, &ds)?;
    let dir = forecast_dir.map_or_else(|| cfg.run_dir().join("forecasts"), Path::to_path_buf);
    let forecasts = (0..test.targets.len())
        .map(|i| {
            let path = window_file(&dir, i);
            if !path.is_file() {
                return Err(HdtError::Config(format!("missing forecast file {}", path.display())));
            }
            read_forecast(&path)
        })
        .collect::<Result<Vec<_>>>()?;
    let (model, base) = score(&forecasts, &test, cfg.horizon, &cfg.eval_options())?;
    let run = cfg.run_dir();
    let mut rows = report_rows("", &model);
    rows.extend(report_rows("persistence_", &base));
    write_rows(&run.join("report.csv"), ["metric", "value"], rows)?;
    let per_window = model.windows.iter().zip(&base.windows).enumerate().map(|(i, (m, b))| {
        [
            i.to_string(),
            m.crps_sum.to_string(),
            m.nrmse_sum.to_string(),
            m.picp.to_string(),
            m.qice.to_string(),
            b.crps_sum.to_string(),
            b.nrmse_sum.to_string(),
        ]
    });
    write_rows(
        &run.join("report_windows.csv"),
        ["window", "crps_sum", "nrmse_sum", "picp", "qice", "persistence_crps_sum", "persistence_nrmse_sum"],
        per_window,
    )?;
    println!(
        "crps_sum {:.6} (persistence {:.6}), nrmse_sum {:.6} (persistence {:.6}), picp {:.2}, qice {:.2}",
        model.crps_sum, base.crps_sum, model.nrmse_sum, base.nrmse_sum, model.picp, model.qice
    );
    Ok(())
}

struct AblationRow {
    setting: String,
    value: String,
    params: usize,
    report: EvalReport,
}

pub fn cmd_ablate(cfg: &RunConfig, variant: Variant) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let stage1 = load_stage1(cfg, None, ds.variates())
        .map_err(|e| HdtError::Config(format!("ablation needs a trained stage 1 ({e})")))?;
    let test = load_test(cfg, &ds)?;
    let opts = cfg.eval_options();
    let evaluate_prior = |prior: &HdtPrior, cfg: &RunConfig| -> Result<EvalReport> {
        let f = forecast_windows(&test.windows, &Forecaster::Hdt { stage1: &stage1, prior }, &cfg.sampler())?;
        Ok(score(&f, &test, cfg.horizon, &opts)?.0)
    };
    let train_variant = |c: &RunConfig| run_stage2(c, &ds, &stage1, None, false).map(|o| o.prior);
    let hdt_row = |setting: &str, value: String, c: &RunConfig| -> Result<AblationRow> {
        let prior = train_variant(c)?;
        Ok(AblationRow {
            setting: setting.into(),
            value,
            params: prior.low.num_scalars() + prior.high.num_scalars(),
            report: evaluate_prior(&prior, c)?,
        })
    };

    let mut rows = Vec::new();
    match variant {
        Variant::NoSelfcond => {
            rows.push(hdt_row("model", "hdt".into(), cfg)?);
            let mut c = cfg.clone();
            c.use_selfcond = false;
            rows.push(hdt_row("model", "hdt-no-selfcond".into(), &c)?);
        }
        Variant::Continuous => {
            rows.push(hdt_row("model", "hdt".into(), cfg)?);
            let train = crate::data::windows(&ds, &cfg.window_spec(Split::Train))?;
            let data = prepare_continuous(&train, &stage1)?;
            let s2 = cfg.stage2(ds.variates());
            let cc = ContinuousConfig {
                prior: s2.prior,
                code_dim: cfg.code_dim,
                steps: cfg.phase1_steps + cfg.phase2_steps,
                batch_size: cfg.stage2_batch,
                lr: cfg.stage2_lr,
                seed: cfg.seed,
            };
            let out = train_continuous(&data, &cc)?;
            let model = Forecaster::Continuous { stage1: &stage1, prior: &out.model };
            let f = forecast_windows(&test.windows, &model, &cfg.sampler())?;
            rows.push(AblationRow {
                setting: "model".into(),
                value: "continuous".into(),
                params: out.model.store.num_scalars(),
                report: score(&f, &test, cfg.horizon, &opts)?.0,
            });
        }
        Variant::TempSweep => {
            let prior = train_variant(cfg)?;
            let params = prior.low.num_scalars() + prior.high.num_scalars();
            for t in TEMPERATURE_GRID {
                let mut c = cfg.clone();
                c.temperature = t;
                rows.push(AblationRow {
                    setting: "temperature".into(),
                    value: t.to_string(),
                    params,
                    report: evaluate_prior(&prior, &c)?,
                });
            }
        }
        Variant::LayerSweep => {
            for layers in [2, 3, 4, 5] {
                let mut c = cfg.clone();
                c.selfcond_layers = layers;
                rows.push(hdt_row("selfcond_layers", layers.to_string(), &c)?);
            }
        }
    }
    let path = cfg.run_dir().join(format!("ablate_{}.csv", variant.label()));
    write_rows(
        &path,
        ["setting", "value", "params", "crps_sum", "nrmse_sum", "picp", "qice"],
        rows.iter().map(|r| {
            [
                r.setting.clone(),
                r.value.clone(),
                r.params.to_string(),
                r.report.crps_sum.to_string(),
                r.report.nrmse_sum.to_string(),
                r.report.picp.to_string(),
                r.report.qice.to_string(),
            ]
        }),
    )?;
    for r in &rows {
        println!("{} = {}: crps_sum {:.6}, nrmse_sum {:.6}", r.setting, r.value, r.report.crps_sum, r.report.nrmse_sum);
    }
    Ok(())
}
