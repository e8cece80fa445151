//! Wide-CSV ingestion, windowing into train/test instances, and a seeded
//! synthetic multi-sinusoid generator.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HdtError, Result};
use crate::series::{scale_window, SeriesWindow};
use crate::tensor::Tensor;

/// A `T×D` multivariate series with a train/test boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub values: Tensor,
    pub timestamps: Vec<String>,
    pub names: Vec<String>,
    /// Informational only.
    pub frequency: String,
    /// First index belonging to the test half.
    pub split: usize,
}

impl Dataset {
    /// Builds a dataset with generated timestamps and the split left at `len`.
    pub fn from_values(values: Tensor) -> Result<Self> {
        let [len, d] = *values.shape() else {
            return Err(HdtError::Dimension(format!("expected T×D, got {:?}", values.shape())));
        };
        Ok(Dataset {
            values,
            timestamps: (0..len).map(|t| t.to_string()).collect(),
            names: (0..d).map(|v| format!("v{v}")).collect(),
            frequency: String::new(),
            split: len,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn variates(&self) -> usize {
        self.values.shape()[1]
    }

    /// Moves the split so the test half is the final `tail` steps.
    pub fn with_test_tail(mut self, tail: usize) -> Result<Self> {
        if tail >= self.len() {
            return Err(HdtError::State(format!(
                "test tail {tail} leaves no training data in a series of length {}",
                self.len()
            )));
        }
        self.split = self.len() - tail;
        Ok(self)
    }

    /// Rows `[start, start+len)` as a `len×D` matrix.
    pub fn rows(&self, start: usize, len: usize) -> Tensor {
        let d = self.variates();
        let data = self.values.data()[start * d..(start + len) * d].to_vec();
        Tensor::new(vec![len, d], data).expect("shape")
    }
}

/// Parses `timestamp,v0,...` with a header row. Rows with non-numeric or
/// non-finite values, or the wrong number of fields, are rejected.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(e, 1))?;
    let header = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    if header.len() < 2 {
        return Err(HdtError::Ingestion {
            line: 1,
            column: None,
            message: "header needs a timestamp column and at least one variate".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let d = names.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != d + 1 {
            return Err(HdtError::Ingestion {
                line,
                column: None,
                message: format!("expected {} fields, found {}", d + 1, record.len()),
            });
        }
        timestamps.push(record[0].to_string());
        for (col, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| HdtError::Ingestion {
                line,
                column: Some(col + 1),
                message: format!("cannot parse {field:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(HdtError::Ingestion {
                    line,
                    column: Some(col + 1),
                    message: format!("non-finite value {field:?}"),
                });
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(HdtError::Ingestion { line: 2, column: None, message: "no data rows".into() });
    }
    let len = timestamps.len();
    Ok(Dataset {
        values: Tensor::new(vec![len, d], values)?,
        timestamps,
        names,
        frequency: String::new(),
        split: len,
    })
}

fn csv_error(e: csv::Error, fallback_line: usize) -> HdtError {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HdtError::Io(io),
        other => HdtError::Ingestion { line, column: None, message: format!("{other:?}") },
    }
}

/// Writes the wide layout read by [`load_csv`]; values use the shortest
/// representation that parses back to the same double.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(e, 0))?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(dataset.names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(e, 0))?;
    let d = dataset.variates();
    for (t, row) in dataset.values.data().chunks(d).enumerate() {
        let mut rec = vec![dataset.timestamps[t].clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_error(e, 0))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
    pub split: Split,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.horizon == 0 || self.horizon % 2 != 0 || self.stride == 0 {
            return Err(HdtError::Config(format!(
                "window spec needs h > 0, even τ and stride ≥ 1, got h={} τ={} stride={}",
                self.history, self.horizon, self.stride
            )));
        }
        Ok(())
    }
}

/// Start indices (of the context) of every window in the requested half.
///
/// Train windows lie entirely in `[0, split)`. Test windows start at
/// `split − h`, so each target begins at or after `split`.
pub fn window_starts(dataset: &Dataset, spec: &WindowSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let span = spec.history + spec.horizon;
    if dataset.len() < span {
        return Err(HdtError::State(format!(
            "series of length {} is shorter than h + τ = {span}",
            dataset.len()
        )));
    }
    let (first, end) = match spec.split {
        Split::Train => (0, dataset.split),
        Split::Test => {
            if dataset.split < spec.history {
                return Err(HdtError::State(format!(
                    "split {} leaves less than h = {} steps of history",
                    dataset.split, spec.history
                )));
            }
            (dataset.split - spec.history, dataset.len())
        }
    };
    if end < first + span {
        return Err(HdtError::State(format!(
            "{:?} half [{first}, {end}) cannot hold a window of {span} steps",
            spec.split
        )));
    }
    Ok((first..=end - span).step_by(spec.stride).collect())
}

/// Scaled windows for the requested half, in start order.
pub fn windows(dataset: &Dataset, spec: &WindowSpec) -> Result<Vec<SeriesWindow>> {
    window_starts(dataset, spec)?
        .into_iter()
        .map(|s| {
            let ctx = dataset.rows(s, spec.history);
            let tgt = dataset.rows(s + spec.history, spec.horizon);
            Ok(scale_window(&SeriesWindow::new(ctx, tgt)?))
        })
        .collect()
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub variates: usize,
    pub length: usize,
    /// Cycled over variates.
    pub periods: Vec<f64>,
    pub noise_sigma: f64,
    /// Slopes are drawn from `trend_scale · U(−1, 1)`.
    pub trend_scale: f64,
    /// Constant offset added to every variate.
    pub level: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(variates: usize, length: usize, seed: u64) -> Self {
        SynthSpec {
            variates,
            length,
            periods: vec![24.0, 48.0, 12.0, 96.0],
            noise_sigma: 0.1,
            trend_scale: 0.0,
            level: 0.0,
            seed,
        }
    }
}

/// `a_d·sin(2πt/p_d + φ_d) + slope_d·t + level + ε` per variate.
pub fn synth_sinusoid(spec: &SynthSpec) -> Result<Dataset> {
    if spec.variates == 0 || spec.length == 0 || spec.periods.is_empty() {
        return Err(HdtError::Parameter("variates, length and periods must be non-empty".into()));
    }
    if spec.periods.iter().any(|&p| !(p > 0.0)) || !(spec.noise_sigma >= 0.0) {
        return Err(HdtError::Parameter("periods must be positive and noise_sigma ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.variates;
    let amp: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    let phase: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..TAU)).collect();
    let slope: Vec<f64> = (0..d).map(|_| spec.trend_scale * rng.random_range(-1.0..1.0)).collect();
    let noise = Normal::new(0.0, spec.noise_sigma).expect("σ ≥ 0");
    let mut data = Vec::with_capacity(spec.length * d);
    for t in 0..spec.length {
        for v in 0..d {
            let p = spec.periods[v % spec.periods.len()];
            let clean = amp[v] * (TAU * t as f64 / p + phase[v]).sin() + slope[v] * t as f64 + spec.level;
            let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push(clean + eps);
        }
    }
    let mut ds = Dataset::from_values(Tensor::new(vec![spec.length, d], data)?)?;
    ds.frequency = "synthetic".into();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn load_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "a.csv", "timestamp,x,y\n0,1,2\n1,3,4.5\n2,-1e3,0\n");
        let ds = load_csv(&p).unwrap();
        assert_eq!(ds.values.shape(), &[3, 2]);
        assert_eq!(ds.values.data(), &[1.0, 2.0, 3.0, 4.5, -1000.0, 0.0]);
        assert_eq!(ds.names, vec!["x", "y"]);
    }

    #[test]
    fn bad_cell_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("timestamp,a,b\n");
        for t in 0..5 {
            body += &format!("{t},1,2\n");
        }
        body += "5,1,oops\n";
        let p = write_file(&dir, "b.csv", &body);
        match load_csv(&p) {
            Err(HdtError::Ingestion { line, column, .. }) => {
                assert_eq!(line, 7);
                assert_eq!(column, Some(3));
            }
            other => panic!("{other:?}"),
        }
        let p = write_file(&dir, "c.csv", "timestamp,a,b\n0,1,2\n1,2\n");
        assert!(matches!(load_csv(&p), Err(HdtError::Ingestion { line: 3, .. })));
        let p = write_file(&dir, "d.csv", "timestamp,a\n0,NaN\n");
        assert!(matches!(load_csv(&p), Err(HdtError::Ingestion { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(vals in proptest::collection::vec(-1e300..1e300f64, 2..40)) {
            let n = vals.len() / 2 * 2;
            let ds = Dataset::from_values(Tensor::new(vec![n / 2, 2], vals[..n].to_vec()).unwrap()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.csv");
            write_csv(&ds, &p).unwrap();
            let back = load_csv(&p).unwrap();
            prop_assert_eq!(back.values, ds.values);
        }

        #[test]
        fn window_count_formula(t in 10usize..300, h in 1usize..40, half_tau in 1usize..20, stride in 1usize..10) {
            let tau = 2 * half_tau;
            prop_assume!(t >= h + tau);
            let ds = Dataset::from_values(Tensor::zeros(&[t, 1])).unwrap();
            let spec = WindowSpec { history: h, horizon: tau, stride, split: Split::Train };
            let starts = window_starts(&ds, &spec).unwrap();
            prop_assert_eq!(starts.len(), (t - h - tau) / stride + 1);
        }

        #[test]
        fn test_targets_never_leak(t in 60usize..300, h in 1usize..20, half_tau in 1usize..10, split_off in 0usize..30) {
            let tau = 2 * half_tau;
            let mut ds = Dataset::from_values(Tensor::zeros(&[t, 1])).unwrap();
            ds.split = (t - tau - split_off).max(h);
            prop_assume!(ds.split + tau <= t && ds.split >= h + tau);
            let spec = WindowSpec { history: h, horizon: tau, stride: tau, split: Split::Test };
            for s in window_starts(&ds, &spec).unwrap() {
                prop_assert!(s + h >= ds.split);
            }
            let spec = WindowSpec { split: Split::Train, ..spec };
            for s in window_starts(&ds, &spec).unwrap() {
                prop_assert!(s + h + tau <= ds.split);
            }
        }
    }

    #[test]
    fn window_examples() {
        let mut ds = Dataset::from_values(Tensor::zeros(&[200, 1])).unwrap();
        ds.split = 150;
        let spec = WindowSpec { history: 96, horizon: 48, stride: 1, split: Split::Train };
        assert_eq!(window_starts(&ds, &spec).unwrap(), (0..7).collect::<Vec<_>>());

        let spec = WindowSpec { history: 10, horizon: 4, stride: 4, split: Split::Test };
        let starts = window_starts(&ds, &spec).unwrap();
        for pair in starts.windows(2) {
            assert_eq!(pair[1] - pair[0], 4);
        }
        assert_eq!(starts[0], 140);

        let short = Dataset::from_values(Tensor::zeros(&[20, 1])).unwrap();
        let spec = WindowSpec { history: 16, horizon: 8, stride: 1, split: Split::Train };
        assert!(matches!(window_starts(&short, &spec), Err(HdtError::State(_))));
    }

    #[test]
    fn synth_properties() {
        let mut spec = SynthSpec::new(3, 480, 4);
        spec.noise_sigma = 0.0;
        spec.periods = vec![24.0, 48.0, 16.0];
        let ds = synth_sinusoid(&spec).unwrap();
        for t in 0..480 - 48 {
            for v in 0..3 {
                let p = [24, 48, 16][v];
                let a = ds.values.at2(t, v);
                let b = ds.values.at2(t + p, v);
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert_eq!(synth_sinusoid(&spec).unwrap(), ds);

        spec.trend_scale = 0.01;
        let trended = synth_sinusoid(&spec).unwrap();
        let slope = (trended.values.at2(48, 1) - trended.values.at2(0, 1)) / 48.0;
        assert!(slope.abs() > 0.0 && slope.abs() <= 0.01);

        let mut noisy = SynthSpec::new(2, 4800, 9);
        noisy.periods = vec![24.0, 48.0];
        noisy.noise_sigma = 0.5;
        let ds = synth_sinusoid(&noisy).unwrap();
        for v in 0..2 {
            let mean = (0..4800).map(|t| ds.values.at2(t, v)).sum::<f64>() / 4800.0;
            assert!(mean.abs() < 3.0 * 0.5 / 4800f64.sqrt(), "{mean}");
        }
    }
}
