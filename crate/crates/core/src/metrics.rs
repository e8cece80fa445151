//! Probabilistic and point scores on variate-summed series, coverage and
//! quantile calibration, plus the persistence baseline.

use rayon::prelude::*;

use crate::error::{HdtError, Result};
use crate::sampler::{quantile_sorted, ForecastDistribution};
use crate::tensor::Tensor;

/// CRPS of the empirical distribution of `samples` at `observation`:
/// `mean|X−y| − ΣΣ|Xi−Xj| / (2N²)`.
pub fn crps_empirical(samples: &[f64], observation: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(HdtError::State("CRPS of an empty sample set".into()));
    }
    let n = samples.len() as f64;
    // Summing in sorted order makes the result independent of path order.
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let abs_err = sorted.iter().map(|x| (x - observation).abs()).sum::<f64>() / n;
    // ΣΣ|Xi−Xj| = 2·Σ (2i − N + 1)·x₍ᵢ₎ over sorted values.
    let spread: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x)
        .sum();
    Ok((abs_err - spread / (n * n)).max(0.0))
}

fn check_shapes(forecast: &ForecastDistribution, target: &Tensor) -> Result<(usize, usize)> {
    let (tau, d) = forecast.path_shape()?;
    if target.shape() != [tau, d] {
        return Err(HdtError::Dimension(format!(
            "forecast paths are {tau}×{d}, target is {:?}",
            target.shape()
        )));
    }
    Ok((tau, d))
}

fn row_sums(x: &Tensor) -> Vec<f64> {
    let d = x.shape()[1];
    x.data().chunks(d).map(|r| r.iter().sum()).collect()
}

/// Unnormalized per-timestep CRPS of the summed series and the summed target.
pub fn crps_sum_terms(forecast: &ForecastDistribution, target: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (tau, _) = check_shapes(forecast, target)?;
    let paths: Vec<Vec<f64>> = forecast.samples.iter().map(row_sums).collect();
    let y = row_sums(target);
    let crps = (0..tau)
        .map(|t| {
            let cell: Vec<f64> = paths.iter().map(|p| p[t]).collect();
            crps_empirical(&cell, y[t])
        })
        .collect::<Result<_>>()?;
    Ok((crps, y))
}

/// Mean over timesteps of the CRPS of the variate-summed series; with
/// `normalize`, divided by the mean absolute summed target.
pub fn crps_sum(forecast: &ForecastDistribution, target: &Tensor, normalize: bool) -> Result<f64> {
    let (crps, y) = crps_sum_terms(forecast, target)?;
    let mean = crps.iter().sum::<f64>() / crps.len() as f64;
    if !normalize {
        return Ok(mean);
    }
    let scale = y.iter().map(|v| v.abs()).sum::<f64>() / y.len() as f64;
    if scale == 0.0 {
        return Err(HdtError::State("summed target is identically zero".into()));
    }
    Ok(mean / scale)
}

/// RMSE of the sample-mean summed forecast, divided by the range of the
/// summed target.
pub fn nrmse_sum(forecast: &ForecastDistribution, target: &Tensor) -> Result<f64> {
    check_shapes(forecast, target)?;
    let mean = row_sums(&forecast.mean()?);
    let y = row_sums(target);
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= 0.0 {
        return Err(HdtError::State("summed target has zero range".into()));
    }
    let mse = mean.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
    Ok(mse.sqrt() / (hi - lo))
}

/// Number of cells whose target lies inside the per-cell
/// `[low, high]` percentile interval, and the number of cells.
pub fn picp_counts(forecast: &ForecastDistribution, target: &Tensor, low: f64, high: f64) -> Result<(usize, usize)> {
    if !(0.0 < low && low < high && high < 100.0) {
        return Err(HdtError::Parameter(format!("need 0 < low < high < 100, got {low}, {high}")));
    }
    let (tau, d) = check_shapes(forecast, target)?;
    let mut inside = 0;
    for t in 0..tau {
        for v in 0..d {
            let mut cell = forecast.cell(t, v);
            cell.sort_by(f64::total_cmp);
            let y = target.at2(t, v);
            if quantile_sorted(&cell, low / 100.0) <= y && y <= quantile_sorted(&cell, high / 100.0) {
                inside += 1;
            }
        }
    }
    Ok((inside, tau * d))
}

/// Percentage of cells covered by the central interval.
pub fn picp(forecast: &ForecastDistribution, target: &Tensor, low: f64, high: f64) -> Result<f64> {
    let (inside, n) = picp_counts(forecast, target, low, high)?;
    Ok(100.0 * inside as f64 / n as f64)
}

/// Per-bin counts of targets among the `bins` equal-probability intervals
/// of each cell's samples. Targets beyond the extreme samples fall into the
/// outer bins.
pub fn qice_counts(forecast: &ForecastDistribution, target: &Tensor, bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return Err(HdtError::Parameter(format!("QICE needs at least 2 bins, got {bins}")));
    }
    let (tau, d) = check_shapes(forecast, target)?;
    let mut counts = vec![0; bins];
    let mut edges = vec![0.0; bins - 1];
    for t in 0..tau {
        for v in 0..d {
            let mut cell = forecast.cell(t, v);
            cell.sort_by(f64::total_cmp);
            for (m, e) in edges.iter_mut().enumerate() {
                *e = quantile_sorted(&cell, (m + 1) as f64 / bins as f64);
            }
            let y = target.at2(t, v);
            counts[edges.iter().filter(|&&e| e < y).count()] += 1;
        }
    }
    Ok(counts)
}

/// `(1/M)·Σ|r_m − 1/M|` in percent for bin counts.
pub fn qice_from_counts(counts: &[usize]) -> f64 {
    let m = counts.len() as f64;
    let n: usize = counts.iter().sum();
    100.0 * counts.iter().map(|&c| (c as f64 / n as f64 - 1.0 / m).abs()).sum::<f64>() / m
}

pub fn qice(forecast: &ForecastDistribution, target: &Tensor, bins: usize) -> Result<f64> {
    Ok(qice_from_counts(&qice_counts(forecast, target, bins)?))
}

/// One sample repeating the last context row `horizon` times.
pub fn persistence_baseline(context: &Tensor, horizon: usize) -> Result<ForecastDistribution> {
    if context.ndim() != 2 || context.shape()[0] == 0 {
        return Err(HdtError::State("persistence needs a non-empty context".into()));
    }
    let h = context.shape()[0];
    let last = context.row(h - 1);
    let data = (0..horizon).flat_map(|_| last.iter().copied()).collect();
    ForecastDistribution::new(vec![Tensor::new(vec![horizon, last.len()], data)?])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub crps_normalize: bool,
    pub picp_low: f64,
    pub picp_high: f64,
    pub qice_bins: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { crps_normalize: true, picp_low: 2.5, picp_high: 97.5, qice_bins: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowScores {
    pub crps_sum: f64,
    pub nrmse_sum: f64,
    pub picp: f64,
    pub qice: f64,
}

/// Aggregate scores. CRPS_sum pools all timesteps of all windows (total
/// CRPS over total absolute summed target when normalized). NRMSE_sum is the
/// mean over windows whose summed target has a non-zero range (NaN per
/// window otherwise). PICP and QICE pool the cell counts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub crps_sum: f64,
    pub nrmse_sum: f64,
    pub picp: f64,
    pub qice: f64,
    pub windows: Vec<WindowScores>,
}

struct Partial {
    scores: WindowScores,
    crps_total: f64,
    abs_total: f64,
    steps: usize,
    inside: usize,
    cells: usize,
    bins: Vec<usize>,
}

fn score_window(f: &ForecastDistribution, y: &Tensor, opts: &EvalOptions) -> Result<Partial> {
    let (crps, sums) = crps_sum_terms(f, y)?;
    let (inside, cells) = picp_counts(f, y, opts.picp_low, opts.picp_high)?;
    let bins = qice_counts(f, y, opts.qice_bins)?;
    let crps_total: f64 = crps.iter().sum();
    let abs_total: f64 = sums.iter().map(|v| v.abs()).sum();
    let window_crps = if opts.crps_normalize {
        if abs_total == 0.0 {
            return Err(HdtError::State("summed target is identically zero".into()));
        }
        crps_total / abs_total
    } else {
        crps_total / crps.len() as f64
    };
    Ok(Partial {
        scores: WindowScores {
            crps_sum: window_crps,
            nrmse_sum: match nrmse_sum(f, y) {
                Err(HdtError::State(_)) => f64::NAN,
                other => other?,
            },
            picp: 100.0 * inside as f64 / cells as f64,
            qice: qice_from_counts(&bins),
        },
        crps_total,
        abs_total,
        steps: crps.len(),
        inside,
        cells,
        bins,
    })
}

pub fn evaluate(forecasts: &[ForecastDistribution], targets: &[Tensor], opts: &EvalOptions) -> Result<EvalReport> {
    if forecasts.len() != targets.len() {
        return Err(HdtError::Dimension(format!(
            "{} forecasts for {} targets",
            forecasts.len(),
            targets.len()
        )));
    }
    if forecasts.is_empty() {
        return Err(HdtError::State("nothing to evaluate".into()));
    }
    let parts: Vec<Partial> = forecasts
        .par_iter()
        .zip(targets)
        .map(|(f, y)| score_window(f, y, opts))
        .collect::<Result<_>>()?;
    let crps_total: f64 = parts.iter().map(|p| p.crps_total).sum();
    let crps_sum = if opts.crps_normalize {
        crps_total / parts.iter().map(|p| p.abs_total).sum::<f64>()
    } else {
        crps_total / parts.iter().map(|p| p.steps).sum::<usize>() as f64
    };
    let mut bins = vec![0; opts.qice_bins];
    for p in &parts {
        for (b, c) in bins.iter_mut().zip(&p.bins) {
            *b += c;
        }
    }
    let inside: usize = parts.iter().map(|p| p.inside).sum();
    let cells: usize = parts.iter().map(|p| p.cells).sum();
    Ok(EvalReport {
        crps_sum,
        nrmse_sum: finite_mean(parts.iter().map(|p| p.scores.nrmse_sum)),
        picp: 100.0 * inside as f64 / cells as f64,
        qice: qice_from_counts(&bins),
        windows: parts.into_iter().map(|p| p.scores).collect(),
    })
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
