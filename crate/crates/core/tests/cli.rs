use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdt::cli::{read_forecast, window_file, write_forecast};
use hdt::config::RunConfig;
use hdt::data::{load_csv, write_csv, Dataset, Split};
use hdt::pipeline::{persistence_forecasts, test_set};
use hdt::tensor::Tensor;
use tempfile::TempDir;

const TINY: &[&str] = &[
    "--set", "history=16",
    "--set", "horizon=8",
    "--set", "trend_kernel=5",
    "--set", "code_dim=8",
    "--set", "codebook_size=16",
    "--set", "stage1_steps=12",
    "--set", "phase1_steps=10",
    "--set", "phase2_steps=10",
    "--set", "stage1_batch=4",
    "--set", "stage2_batch=4",
    "--set", "samples=6",
    "--set", "test_length=40",
];

fn hdt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdt"))
        .current_dir(dir)
        .env_remove("HDT_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn hdt_tiny(dir: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--data", "data.csv"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    hdt(dir, &args)
}

#[track_caller]
fn ok(out: &Output) {
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn with_data() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&hdt(dir.path(), &["synth", "--out", "data.csv", "--variates", "2", "--length", "160", "--seed", "3"]));
    dir
}

fn trained() -> TempDir {
    let dir = with_data();
    ok(&hdt_tiny(dir.path(), "train-stage1", &[]));
    ok(&hdt_tiny(dir.path(), "train-stage2", &[]));
    dir
}

fn forecasts(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    snapshot(&dir.join("runs/default/forecasts"))
}

#[test]
fn full_pipeline_is_bit_reproducible() {
    let dir = trained();
    let run = dir.path().join("runs/default");
    ok(&hdt_tiny(dir.path(), "forecast", &[]));
    ok(&hdt_tiny(dir.path(), "evaluate", &[]));
    for f in ["config.echo", "stage1.ckpt", "stage2.ckpt", "report.csv", "report_windows.csv", "logs/stage2.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    for m in ["crps_sum", "nrmse_sum", "picp", "qice", "persistence_crps_sum"] {
        assert!(report.lines().any(|l| l.starts_with(&format!("{m},"))), "{m}");
    }
    let first = snapshot(&run);

    for cmd in ["train-stage1", "train-stage2", "forecast", "evaluate"] {
        ok(&hdt_tiny(dir.path(), cmd, &[]));
    }
    assert_eq!(first, snapshot(&run));

    // The echoed configuration reproduces the run on its own.
    let other = dir.path().join("echo-run");
    fs::create_dir(&other).unwrap();
    fs::copy(dir.path().join("data.csv"), other.join("data.csv")).unwrap();
    fs::write(other.join("run.conf"), fs::read(run.join("config.echo")).unwrap()).unwrap();
    for cmd in ["train-stage1", "train-stage2", "forecast", "evaluate"] {
        ok(&hdt(&other, &[cmd, "--config", "run.conf"]));
    }
    assert_eq!(first, snapshot(&other.join("runs/default")));
}

#[test]
fn echo_resolves_every_key() {
    let dir = with_data();
    ok(&hdt_tiny(dir.path(), "train-stage1", &["--seed", "9"]));
    let echo = fs::read_to_string(dir.path().join("runs/default/config.echo")).unwrap();
    let mut cfg = RunConfig::default();
    cfg.apply_text(&echo).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.horizon, 8);
    assert_eq!(cfg.echo(), echo);
}

#[test]
fn missing_or_bad_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = hdt(dir.path(), &["train-stage1", "--data", "nope.csv"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.csv"));
    assert_eq!(code(&hdt(dir.path(), &["train-stage1"])), 2);
    assert_eq!(code(&hdt(dir.path(), &["train-stage1", "--set", "colour=red"])), 2);
    assert_eq!(code(&hdt(dir.path(), &["train-stage1", "--set", "horizon"])), 2);
    assert_eq!(code(&hdt(dir.path(), &["train-stage1", "--set", "codebook_size=1"])), 2);
    assert_eq!(code(&hdt(dir.path(), &["no-such-command"])), 2);
    assert_eq!(code(&hdt(dir.path(), &["ablate", "--variant", "bogus"])), 2);
}

#[test]
fn incompatible_checkpoints_are_named() {
    let dir = trained();
    let out = hdt_tiny(dir.path(), "train-stage2", &["--set", "horizon=10"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("horizon"), "{}", stderr(&out));

    let out = hdt_tiny(dir.path(), "forecast", &["--set", "codebook_size=8"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("codebook_size"), "{}", stderr(&out));

    let out = hdt_tiny(dir.path(), "forecast", &["--stage2", "missing.ckpt"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn phase1_only_stops_before_phase2() {
    let dir = with_data();
    ok(&hdt_tiny(dir.path(), "train-stage1", &[]));
    ok(&hdt_tiny(dir.path(), "train-stage2", &["--phase1-only"]));
    let log = fs::read_to_string(dir.path().join("runs/default/logs/stage2.csv")).unwrap();
    let phases: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(phases.len(), 10);
    assert!(phases.iter().all(|&p| p == "1"));
}

#[test]
fn forecast_flags() {
    let dir = trained();
    let p = dir.path();
    ok(&hdt_tiny(p, "forecast", &[]));
    let plain = forecasts(p);
    ok(&hdt_tiny(p, "forecast", &["--missing-rate", "0"]));
    assert_eq!(plain, forecasts(p));
    ok(&hdt_tiny(p, "forecast", &["--missing-rate", "0.5"]));
    assert_ne!(plain, forecasts(p));

    for t in ["0", "-1"] {
        assert_eq!(code(&hdt_tiny(p, "forecast", &["--temperature", t])), 2);
    }

    ok(&hdt_tiny(p, "forecast", &["--temperature", "1e-9", "--seed", "1"]));
    let greedy = forecasts(p);
    ok(&hdt_tiny(p, "forecast", &["--temperature", "1e-9", "--seed", "2"]));
    assert_eq!(greedy, forecasts(p));
    ok(&hdt_tiny(p, "forecast", &["--seed", "2"]));
    assert_ne!(plain, forecasts(p));

    ok(&hdt_tiny(p, "forecast", &["--samples", "3"]));
    let f = read_forecast(&window_file(&p.join("runs/default/forecasts"), 0)).unwrap();
    assert_eq!(f.num_samples(), 3);
    assert_eq!(f.path_shape().unwrap(), (8, 2));
}

#[test]
fn persistence_on_constant_series_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ds = Dataset::from_values(Tensor::full(&[120, 3], 4.5)).unwrap();
    write_csv(&ds, &p.join("data.csv")).unwrap();

    let mut cfg = RunConfig::default();
    cfg.apply_text("history = 16\nhorizon = 8\ntest_length = 40\n").unwrap();
    let ds = load_csv(&p.join("data.csv")).unwrap().with_test_tail(cfg.test_tail()).unwrap();
    let test = test_set(&ds, &cfg.window_spec(Split::Test)).unwrap();
    let out_dir = p.join("persistence");
    fs::create_dir(&out_dir).unwrap();
    for (i, f) in persistence_forecasts(&test, 8).unwrap().iter().enumerate() {
        write_forecast(&window_file(&out_dir, i), f).unwrap();
    }

    let args = ["evaluate", "--data", "data.csv", "--set", "history=16", "--set", "horizon=8", "--set", "test_length=40"];
    let mut with_dir = args.to_vec();
    with_dir.extend(["--forecasts", "persistence"]);
    ok(&hdt(p, &with_dir));
    let report = fs::read_to_string(p.join("runs/default/report.csv")).unwrap();
    assert!(report.lines().any(|l| l == "crps_sum,0"), "{report}");
    let first = snapshot(&p.join("runs"));
    ok(&hdt(p, &with_dir));
    assert_eq!(first, snapshot(&p.join("runs")));

    // Horizon disagreement between files and targets.
    let short = Tensor::full(&[6, 3], 4.5);
    let dist = hdt::sampler::ForecastDistribution::new(vec![short]).unwrap();
    write_forecast(&window_file(&out_dir, 0), &dist).unwrap();
    assert_eq!(code(&hdt(p, &with_dir)), 2);
    assert_eq!(code(&hdt(p, &args)), 2);
}

#[test]
fn ablate_needs_stage1_and_writes_comparison() {
    let dir = with_data();
    let p = dir.path();
    assert_eq!(code(&hdt_tiny(p, "ablate", &["--variant", "no-selfcond"])), 2);
    ok(&hdt_tiny(p, "train-stage1", &[]));
    ok(&hdt_tiny(p, "ablate", &["--variant", "no-selfcond"]));
    let csv = fs::read_to_string(p.join("runs/default/ablate_no-selfcond.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], "hdt");
    assert_eq!(rows[1][1], "hdt-no-selfcond");
    let params = |r: &Vec<&str>| r[2].parse::<usize>().unwrap();
    assert!(params(&rows[1]) < params(&rows[0]));

    ok(&hdt_tiny(p, "ablate", &["--variant", "temp-sweep"]));
    let csv = fs::read_to_string(p.join("runs/default/ablate_temp-sweep.csv")).unwrap();
    let temps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(temps, ["1", "2", "3", "5", "8"]);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&hdt(p, &["synth", "--out", "a.csv", "--length", "50", "--seed", "5"]));
    let out = Command::new(env!("CARGO_BIN_EXE_hdt"))
        .current_dir(p)
        .env("HDT_SEED", "5")
        .args(["synth", "--out", "b.csv", "--length", "50"])
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(fs::read(p.join("a.csv")).unwrap(), fs::read(p.join("b.csv")).unwrap());
    let bad = Command::new(env!("CARGO_BIN_EXE_hdt"))
        .current_dir(p)
        .env("HDT_SEED", "x")
        .args(["synth", "--out", "c.csv"])
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}
