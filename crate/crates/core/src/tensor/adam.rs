use super::param::ParamStore;
use super::tape::ParamGrads;
use super::Tensor;
use crate::error::{HdtError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; first and second moments are kept per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }

    /// Applies one update. Parameters without a gradient are skipped but
    /// the step counter still advances. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if !g.is_finite() {
                    return Err(HdtError::Training(format!(
                        "non-finite gradient for parameter {}",
                        store.name(id)
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.0;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Serializes moments as `(name, tensor)` entries under `prefix`.
    pub fn state_entries(&self, prefix: &str, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{prefix}.step"),
            Tensor::scalar(self.step as f64),
        )];
        for (i, p) in store.iter().enumerate() {
            out.push((format!("{prefix}.m.{}", p.name), self.m[i].clone()));
            out.push((format!("{prefix}.v.{}", p.name), self.v[i].clone()));
        }
        out
    }

    pub fn load_state<'a>(
        &mut self,
        prefix: &str,
        store: &ParamStore,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor>,
    ) -> Result<()> {
        let missing = |n: &str| HdtError::Checkpoint(format!("missing optimizer entry {n}"));
        let step_name = format!("{prefix}.step");
        self.step = lookup(&step_name).ok_or_else(|| missing(&step_name))?.item() as u64;
        for (i, p) in store.iter().enumerate() {
            let mn = format!("{prefix}.m.{}", p.name);
            let vn = format!("{prefix}.v.{}", p.name);
            self.m[i] = lookup(&mn).ok_or_else(|| missing(&mn))?.clone();
            self.v[i] = lookup(&vn).ok_or_else(|| missing(&vn))?.clone();
        }
        Ok(())
    }
}
