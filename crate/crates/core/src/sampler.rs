//! Autoregressive temperature sampling of trend then target tokens, decoded
//! into a set of forecast paths.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{HdtError, Result};
use crate::series::{rescale, SeriesWindow};
use crate::tensor::{ParamStore, Tensor};
use crate::transformer::{HdtPrior, TokenDecoder};
use crate::vq::{CodebookKind, Stage1Model, TokenSequence};

/// Temperatures below this use argmax.
pub const GREEDY_THRESHOLD: f64 = 1e-6;

/// The temperature grid swept by the ablation.
pub const TEMPERATURE_GRID: [f64; 5] = [1.0, 2.0, 3.0, 5.0, 8.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub num_samples: usize,
    pub seed: u64,
    pub greedy_threshold: f64,
}

impl SamplerConfig {
    pub fn new(temperature: f64, num_samples: usize, seed: u64) -> Self {
        SamplerConfig { temperature, num_samples, seed, greedy_threshold: GREEDY_THRESHOLD }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(HdtError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.num_samples == 0 {
            return Err(HdtError::Config("num_samples must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Lowest index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws one index from `softmax(logits / temperature)`, or the argmax when
/// `temperature < threshold`.
pub fn sample_index<R: Rng>(logits: &[f64], temperature: f64, threshold: f64, rng: &mut R) -> usize {
    if temperature < threshold {
        return argmax(logits);
    }
    let max = logits[argmax(logits)];
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    WeightedIndex::new(&weights).expect("max weight is 1").sample(rng)
}

/// Generates `length` tokens; `next_logits` receives the tokens drawn so
/// far (empty at the first step, i.e. after the start token).
pub fn sample_tokens<R: Rng>(
    mut next_logits: impl FnMut(&[usize]) -> Result<Vec<f64>>,
    length: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(temperature > 0.0) {
        return Err(HdtError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        let logits = next_logits(&out)?;
        out.push(sample_index(&logits, temperature, GREEDY_THRESHOLD, rng));
    }
    Ok(out)
}

/// Samples one full sequence per memory row with cached decoding; row `b`
/// draws from `rngs[b]`.
pub fn generate<R: Rng>(
    decoder: &TokenDecoder,
    store: &ParamStore,
    memory: &Tensor,
    cond: Option<&[usize]>,
    temperature: f64,
    rngs: &mut [R],
) -> Result<Vec<Vec<usize>>> {
    let batch = memory.shape()[0];
    if rngs.len() != batch {
        return Err(HdtError::Dimension(format!("{} generators for {batch} rows", rngs.len())));
    }
    let mut state = decoder.start(store, memory, cond)?;
    let mut seqs = vec![Vec::with_capacity(decoder.len); batch];
    let mut prev = vec![decoder.bos(); batch];
    for _ in 0..decoder.len {
        let logits = decoder.step(store, &mut state, &prev)?;
        for (b, rng) in rngs.iter_mut().enumerate() {
            let tok = sample_index(logits.row(b), temperature, GREEDY_THRESHOLD, rng);
            seqs[b].push(tok);
            prev[b] = tok;
        }
    }
    Ok(seqs)
}

/// Sample paths for one window (each `τ×D`) with per-cell quantiles on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastDistribution {
    pub samples: Vec<Tensor>,
}

impl ForecastDistribution {
    pub fn new(samples: Vec<Tensor>) -> Result<Self> {
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.shape() != first.shape()) {
                return Err(HdtError::Dimension("sample paths differ in shape".into()));
            }
        }
        Ok(ForecastDistribution { samples })
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// `(τ, D)` of each path.
    pub fn path_shape(&self) -> Result<(usize, usize)> {
        let s = self.samples.first().ok_or_else(|| HdtError::State("empty forecast".into()))?;
        Ok((s.shape()[0], s.shape()[1]))
    }

    /// The sample values at one cell.
    pub fn cell(&self, t: usize, v: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.at2(t, v)).collect()
    }

    pub fn mean(&self) -> Result<Tensor> {
        let (tau, d) = self.path_shape()?;
        let mut acc = Tensor::zeros(&[tau, d]);
        for s in &self.samples {
            for (a, v) in acc.data_mut().iter_mut().zip(s.data()) {
                *a += v;
            }
        }
        let n = self.samples.len() as f64;
        Ok(acc.map(|v| v / n))
    }

    /// Per-cell empirical quantiles by linear interpolation between order
    /// statistics, one `τ×D` matrix per level.
    pub fn quantiles(&self, levels: &[f64]) -> Result<Vec<Tensor>> {
        let (tau, d) = self.path_shape()?;
        if let Some(&bad) = levels.iter().find(|&&l| !(l > 0.0 && l < 1.0)) {
            return Err(HdtError::Parameter(format!("quantile level {bad} outside (0, 1)")));
        }
        let mut out = vec![Tensor::zeros(&[tau, d]); levels.len()];
        for t in 0..tau {
            for v in 0..d {
                let mut cell = self.cell(t, v);
                cell.sort_by(f64::total_cmp);
                for (q, &l) in out.iter_mut().zip(levels) {
                    q.data_mut()[t * d + v] = quantile_sorted(&cell, l);
                }
            }
        }
        Ok(out)
    }
}

/// Linear interpolation at rank `level·(n−1)` of sorted values.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let pos = level * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Generator for path `path` of a window forecast seeded with `seed`.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Samples `num_samples` forecast paths for one scaled window and returns
/// them in the window's original units.
pub fn forecast(
    window: &SeriesWindow,
    stage1: &Stage1Model,
    prior: &HdtPrior,
    cfg: &SamplerConfig,
) -> Result<ForecastDistribution> {
    cfg.validate()?;
    check_compatible(window, stage1, prior)?;
    let memory = prior.context_memory(&[&window.context])?;
    let paths: Vec<Vec<usize>> = (0..cfg.num_samples)
        .into_par_iter()
        .map(|p| {
            let mut rng = [path_rng(cfg.seed, p)];
            let down = generate(&prior.base, &prior.low, &memory, None, cfg.temperature, &mut rng)?;
            let cond = prior.selfcond.has_condition().then_some(down[0].as_slice());
            let pred = generate(&prior.selfcond, &prior.high, &memory, cond, cfg.temperature, &mut rng)?;
            Ok(pred.into_iter().next().expect("one row"))
        })
        .collect::<Result<_>>()?;
    let seqs: Vec<TokenSequence> = paths
        .into_iter()
        .map(|indices| TokenSequence { indices, kind: CodebookKind::Target })
        .collect();
    let decoded = stage1.target.detokenize(&seqs)?;
    ForecastDistribution::new(decoded.iter().map(|x| rescale(x, &window.scale)).collect())
}

pub(crate) fn check_compatible(window: &SeriesWindow, stage1: &Stage1Model, prior: &HdtPrior) -> Result<()> {
    let (c1, c2) = (stage1.config(), &prior.config);
    let checks = [
        ("variates", window.variates(), c2.variates),
        ("variates", c1.variates, c2.variates),
        ("history", window.history_len(), c2.history),
        ("horizon", window.horizon(), c2.horizon),
        ("horizon", c1.horizon, c2.horizon),
        ("target codebook", c1.codebook_size, c2.target_codebook),
        ("trend codebook", stage1.trend.config.codebook_size, c2.down_codebook),
    ];
    for (name, a, b) in checks {
        if a != b {
            return Err(HdtError::Config(format!("{name} mismatch: {a} vs {b}")));
        }
    }
    Ok(())
}

/// Shannon entropy (nats) of the empirical distribution of `draws`.
pub fn empirical_entropy(draws: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    for &d in draws {
        counts[d] += 1;
    }
    let n = draws.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}
