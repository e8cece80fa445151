//! Reference implementations kept deliberately naive.

use hdt::tensor::Tensor;

/// Trapezoid integration of `(F̂(y) − 1{obs ≤ y})²` over a padded grid.
pub fn crps_quadrature(samples: &[f64], obs: f64, points: usize) -> f64 {
    let lo = samples.iter().copied().fold(obs, f64::min) - 1.0;
    let hi = samples.iter().copied().fold(obs, f64::max) + 1.0;
    let n = samples.len() as f64;
    let f = |y: f64| {
        let cdf = samples.iter().filter(|&&x| x <= y).count() as f64 / n;
        let step = if obs <= y { 1.0 } else { 0.0 };
        (cdf - step).powi(2)
    };
    let h = (hi - lo) / (points - 1) as f64;
    let mut total = 0.0;
    let mut prev = f(lo);
    for i in 1..points {
        let cur = f(lo + i as f64 * h);
        total += 0.5 * h * (prev + cur);
        prev = cur;
    }
    total
}

/// Closed form with the explicit double sum.
pub fn crps_double_sum(samples: &[f64], obs: f64) -> f64 {
    let n = samples.len() as f64;
    let first = samples.iter().map(|x| (x - obs).abs()).sum::<f64>() / n;
    let mut pair = 0.0;
    for a in samples {
        for b in samples {
            pair += (a - b).abs();
        }
    }
    first - pair / (2.0 * n * n)
}

/// Builds the summed series explicitly, path by path, then averages the
/// per-step double-sum CRPS.
pub fn crps_sum_brute(samples: &[Tensor], target: &Tensor, normalize: bool) -> f64 {
    let (tau, d) = (target.shape()[0], target.shape()[1]);
    let mut total = 0.0;
    let mut abs = 0.0;
    for t in 0..tau {
        let mut y = 0.0;
        for v in 0..d {
            y += target.at2(t, v);
        }
        let summed: Vec<f64> = samples
            .iter()
            .map(|s| {
                let mut acc = 0.0;
                for v in 0..d {
                    acc += s.at2(t, v);
                }
                acc
            })
            .collect();
        total += crps_double_sum(&summed, y);
        abs += y.abs();
    }
    if normalize {
        total / abs
    } else {
        total / tau as f64
    }
}
