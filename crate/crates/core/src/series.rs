//! Window-level series transforms shared by both stages: moving-average
//! trend extraction, per-window scaling and missing-value masking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, HdtError, Result};
use crate::tensor::Tensor;

/// Default moving-average width for the trend series.
pub const DEFAULT_TREND_KERNEL: usize = 25;

/// One instance: `context` is `h×D`, `target` is `τ×D`, both time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    pub context: Tensor,
    pub target: Tensor,
    /// Per-variate divisor already applied to `context` and `target`.
    pub scale: Vec<f64>,
    /// `true` = observed. Present only after masking.
    pub mask: Option<Vec<bool>>,
    /// Pre-scaling values, kept so [`unscale`] is exact.
    original: Option<Box<(Tensor, Tensor)>>,
}

impl SeriesWindow {
    pub fn new(context: Tensor, target: Tensor) -> Result<Self> {
        if context.ndim() != 2 || target.ndim() != 2 {
            return dim_err("context and target must be 2-D (time × variates)");
        }
        if context.shape()[1] != target.shape()[1] {
            return dim_err(format!(
                "context has {} variates, target has {}",
                context.shape()[1],
                target.shape()[1]
            ));
        }
        let d = context.shape()[1];
        Ok(SeriesWindow {
            context,
            target,
            scale: vec![1.0; d],
            mask: None,
            original: None,
        })
    }

    pub fn history_len(&self) -> usize {
        self.context.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn variates(&self) -> usize {
        self.context.shape()[1]
    }
}

/// Moving-average trend of `target` with replicated edges; output has the
/// input's shape.
pub fn downsample(target: &Tensor, kernel: usize) -> Result<Tensor> {
    let [len, d] = *target.shape() else {
        return dim_err(format!("downsample expects τ×D, got {:?}", target.shape()));
    };
    if kernel % 2 == 0 || kernel == 0 || kernel > 2 * len - 1 {
        return Err(HdtError::Parameter(format!(
            "moving-average kernel must be odd and within [1, {}], got {kernel}",
            2 * len - 1
        )));
    }
    let half = (kernel / 2) as isize;
    let src = target.data();
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        for v in 0..d {
            let mut acc = 0.0;
            for off in -half..=half {
                let idx = (t as isize + off).clamp(0, len as isize - 1) as usize;
                acc += src[idx * d + v];
            }
            out[t * d + v] = acc / kernel as f64;
        }
    }
    Tensor::new(vec![len, d], out)
}

/// Largest odd kernel not exceeding `requested` or the horizon.
pub fn effective_kernel(requested: usize, horizon: usize) -> usize {
    let k = requested.min(horizon).max(1);
    if k % 2 == 0 {
        k - 1
    } else {
        k
    }
}

/// Divides context and target by `mean(|context[:, d]|) + 1` per variate.
pub fn scale_window(window: &SeriesWindow) -> SeriesWindow {
    let (h, d) = (window.history_len(), window.variates());
    let mut scale = vec![0.0; d];
    for row in window.context.data().chunks(d) {
        for (s, v) in scale.iter_mut().zip(row) {
            *s += v.abs();
        }
    }
    for s in &mut scale {
        *s = *s / h as f64 + 1.0;
    }
    let divide = |t: &Tensor| {
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, s) in row.iter_mut().zip(&scale) {
                *v /= s;
            }
        }
        out
    };
    SeriesWindow {
        context: divide(&window.context),
        target: divide(&window.target),
        scale,
        mask: window.mask.clone(),
        original: Some(Box::new((window.context.clone(), window.target.clone()))),
    }
}

/// Inverse of [`scale_window`]. Exact for windows produced by it.
pub fn unscale(window: &SeriesWindow) -> SeriesWindow {
    let (context, target) = match &window.original {
        Some(orig) => (orig.0.clone(), orig.1.clone()),
        None => (
            rescale(&window.context, &window.scale),
            rescale(&window.target, &window.scale),
        ),
    };
    let d = window.variates();
    SeriesWindow {
        context,
        target,
        scale: vec![1.0; d],
        mask: window.mask.clone(),
        original: None,
    }
}

/// Multiplies each variate column of a time-major matrix by its scale.
pub fn rescale(values: &Tensor, scale: &[f64]) -> Tensor {
    let d = scale.len();
    let mut out = values.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (v, s) in row.iter_mut().zip(scale) {
            *v *= s;
        }
    }
    out
}

/// Zeroes each context entry independently with probability `rate` and
/// records the observation mask. The target is left alone.
pub fn apply_missing_mask(window: &SeriesWindow, rate: f64, seed: u64) -> Result<SeriesWindow> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(HdtError::Parameter(format!(
            "missing rate must lie in [0, 1], got {rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = window.clone();
    let mut mask = Vec::with_capacity(out.context.numel());
    for v in out.context.data_mut() {
        let observed = rng.random::<f64>() >= rate;
        if !observed {
            *v = 0.0;
        }
        mask.push(observed);
    }
    out.mask = Some(mask);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn downsample_examples() {
        let c = downsample(&col(&[2.5; 7]), 5).unwrap();
        assert!(c.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));

        let out = downsample(&col(&[1.0, 2.0, 3.0, 4.0]), 3).unwrap();
        let expected = [4.0 / 3.0, 2.0, 3.0, 11.0 / 3.0];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }

        let x = col(&[0.3, -1.0, 7.0]);
        assert_eq!(downsample(&x, 1).unwrap(), x);
        assert!(downsample(&x, 2).is_err());
        assert!(downsample(&x, 7).is_err());
        assert!(downsample(&x, 5).is_ok());
    }

    #[test]
    fn kernel_clamps_to_horizon() {
        assert_eq!(effective_kernel(25, 96), 25);
        assert_eq!(effective_kernel(25, 24), 23);
        assert_eq!(effective_kernel(25, 13), 13);
    }

    fn window(ctx: Vec<f64>, h: usize, d: usize) -> SeriesWindow {
        let target = Tensor::full(&[2, d], 3.0);
        SeriesWindow::new(Tensor::new(vec![h, d], ctx).unwrap(), target).unwrap()
    }

    #[test]
    fn scaling_examples() {
        let w = window(vec![0.0; 6], 3, 2);
        let s = scale_window(&w);
        assert_eq!(s.scale, vec![1.0, 1.0]);
        assert_eq!(s.context, w.context);

        let w = window(vec![9.0; 4], 4, 1);
        let s = scale_window(&w);
        assert_eq!(s.scale, vec![10.0]);
        assert!(s.context.data().iter().all(|&v| v == 0.9));
    }

    #[test]
    fn masking_extremes_and_errors() {
        let w = window((0..20).map(f64::from).collect(), 10, 2);
        let none = apply_missing_mask(&w, 0.0, 1).unwrap();
        assert_eq!(none.context, w.context);
        assert!(none.mask.as_ref().unwrap().iter().all(|&m| m));
        let all = apply_missing_mask(&w, 1.0, 1).unwrap();
        assert!(all.context.data().iter().all(|&v| v == 0.0));
        assert_eq!(all.target, w.target);
        assert!(apply_missing_mask(&w, 1.5, 1).is_err());
        assert!(apply_missing_mask(&w, -0.1, 1).is_err());
    }

    #[test]
    fn masking_rate_concentrates() {
        let w = window(vec![1.0; 10_000], 2_500, 4);
        let m = apply_missing_mask(&w, 0.5, 42).unwrap();
        let masked = m.mask.unwrap().iter().filter(|&&o| !o).count() as f64 / 10_000.0;
        // 4σ of a Binomial(10⁴, ½) fraction is 0.02.
        assert!((masked - 0.5).abs() <= 0.02, "{masked}");
    }

    fn arb_series() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0..10.0f64, 8..40)
    }

    proptest! {
        #[test]
        fn downsample_is_linear(x in arb_series(), a in -3.0..3.0f64, b in -3.0..3.0f64, k in 0usize..4) {
            let k = 2 * k + 1;
            let y: Vec<f64> = x.iter().rev().copied().collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = downsample(&col(&combo), k).unwrap();
            let dx = downsample(&col(&x), k).unwrap();
            let dy = downsample(&col(&y), k).unwrap();
            for ((l, p), q) in lhs.data().iter().zip(dx.data()).zip(dy.data()) {
                prop_assert!((l - (a * p + b * q)).abs() < 1e-9);
            }
        }

        #[test]
        fn downsample_shift_equivariant_in_interior(x in arb_series(), k in 0usize..3) {
            let k = 2 * k + 1;
            let half = k / 2;
            let shifted: Vec<f64> = x[1..].to_vec();
            let full = downsample(&col(&x), k).unwrap();
            let sh = downsample(&col(&shifted), k).unwrap();
            // Interior positions of the shifted series see no padding.
            for t in half..shifted.len().saturating_sub(half) {
                prop_assert!((sh.data()[t] - full.data()[t + 1]).abs() < 1e-12);
            }
        }

        #[test]
        fn downsample_never_amplifies_variance(x in arb_series(), k in 1usize..4) {
            let k = 2 * k + 1;
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
            let var = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64
            };
            if k <= 2 * centered.len() - 1 {
                let out = downsample(&col(&centered), k).unwrap();
                prop_assert!(var(out.data()) <= var(&centered) + 1e-12);
            }
        }

        #[test]
        fn scale_round_trip_is_bit_exact(ctx in proptest::collection::vec(-1e3..1e3f64, 12)) {
            let w = window(ctx, 6, 2);
            let back = unscale(&scale_window(&w));
            prop_assert_eq!(back, w);
        }

        #[test]
        fn masking_keeps_observed_entries(ctx in proptest::collection::vec(-5.0..5.0f64, 30), rate in 0.0..1.0f64, seed: u64) {
            let w = window(ctx, 10, 3);
            let m = apply_missing_mask(&w, rate, seed).unwrap();
            for ((a, b), &obs) in m.context.data().iter().zip(w.context.data()).zip(m.mask.as_ref().unwrap()) {
                if obs {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                } else {
                    prop_assert_eq!(*a, 0.0);
                }
            }
        }
    }
}
