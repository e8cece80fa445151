//! Glue shared by the command-line front end and end-to-end checks:
//! test-window preparation, per-window forecasting and scoring.

use crate::data::{windows, Dataset, Split, WindowSpec};
use crate::error::Result;
use crate::metrics::{evaluate, persistence_baseline, EvalOptions, EvalReport};
use crate::sampler::{forecast, ForecastDistribution, SamplerConfig};
use crate::series::{apply_missing_mask, unscale, SeriesWindow};
use crate::tensor::Tensor;
use crate::transformer::{forecast_continuous, ContinuousPrior, HdtPrior};
use crate::vq::Stage1Model;

/// Scaled test windows with their targets and contexts in original units.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub windows: Vec<SeriesWindow>,
    pub targets: Vec<Tensor>,
    pub contexts: Vec<Tensor>,
}

pub fn test_set(dataset: &Dataset, spec: &WindowSpec) -> Result<TestSet> {
    debug_assert_eq!(spec.split, Split::Test);
    let windows = windows(dataset, spec)?;
    let raw: Vec<SeriesWindow> = windows.iter().map(unscale).collect();
    Ok(TestSet {
        targets: raw.iter().map(|w| w.target.clone()).collect(),
        contexts: raw.into_iter().map(|w| w.context).collect(),
        windows,
    })
}

/// Seed of window `index` for a run seeded with `seed`.
pub fn window_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Masks test contexts at `rate` (a no-op at 0).
pub fn mask_windows(windows: &[SeriesWindow], rate: f64, seed: u64) -> Result<Vec<SeriesWindow>> {
    if rate == 0.0 {
        return Ok(windows.to_vec());
    }
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| apply_missing_mask(w, rate, window_seed(seed ^ 0x4d41_534b, i)))
        .collect()
}

pub enum Forecaster<'a> {
    Hdt { stage1: &'a Stage1Model, prior: &'a HdtPrior },
    Continuous { stage1: &'a Stage1Model, prior: &'a ContinuousPrior },
}

impl Forecaster<'_> {
    pub fn forecast(&self, window: &SeriesWindow, cfg: &SamplerConfig) -> Result<ForecastDistribution> {
        match self {
            Forecaster::Hdt { stage1, prior } => forecast(window, stage1, prior, cfg),
            Forecaster::Continuous { stage1, prior } => forecast_continuous(window, stage1, prior, cfg),
        }
    }
}

/// One distribution per window; window `i` samples with `window_seed(seed, i)`.
pub fn forecast_windows(
    windows: &[SeriesWindow],
    model: &Forecaster<'_>,
    sampler: &SamplerConfig,
) -> Result<Vec<ForecastDistribution>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let cfg = SamplerConfig { seed: window_seed(sampler.seed, i), ..*sampler };
            model.forecast(w, &cfg)
        })
        .collect()
}

pub fn persistence_forecasts(test: &TestSet, horizon: usize) -> Result<Vec<ForecastDistribution>> {
    test.contexts.iter().map(|c| persistence_baseline(c, horizon)).collect()
}

/// Model and persistence reports over the same targets.
pub fn score(
    forecasts: &[ForecastDistribution],
    test: &TestSet,
    horizon: usize,
    opts: &EvalOptions,
) -> Result<(EvalReport, EvalReport)> {
    let model = evaluate(forecasts, &test.targets, opts)?;
    let baseline = evaluate(&persistence_forecasts(test, horizon)?, &test.targets, opts)?;
    Ok((model, baseline))
}
