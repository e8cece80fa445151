//! Ablation without quantization: the prior regresses the target
//! tokenizer's continuous latents and samples by adding Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::layers::{DecoderLayer, LayerCache};
use super::model::{ContextEncoder, PriorConfig};
use crate::error::{HdtError, Result};
use crate::nn::{LayerNorm, Linear};
use crate::sampler::{path_rng, ForecastDistribution, SamplerConfig};
use crate::series::{rescale, SeriesWindow};
use crate::tensor::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};
use crate::vq::Stage1Model;

/// Encoder plus a causal decoder over latent vectors. Each input row is the
/// previous latent with an extra start flag, so the start embedding is the
/// flag's column of the input projection.
#[derive(Clone, Debug)]
pub struct ContinuousPrior {
    pub config: PriorConfig,
    pub code_dim: usize,
    pub store: ParamStore,
    encoder: ContextEncoder,
    input: Linear,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    head: Linear,
    /// Per-dimension residual scale estimated after training.
    pub noise_std: f64,
}

#[derive(Clone, Debug)]
pub struct ContinuousData {
    pub contexts: Vec<Tensor>,
    /// `m×n_z` unquantized target latents.
    pub latents: Vec<Tensor>,
}

pub fn prepare_continuous(windows: &[SeriesWindow], stage1: &Stage1Model) -> Result<ContinuousData> {
    let mut data = ContinuousData { contexts: Vec::new(), latents: Vec::new() };
    for chunk in windows.chunks(256) {
        let targets: Vec<&Tensor> = chunk.iter().map(|w| &w.target).collect();
        data.latents.extend(stage1.target.encode_latents(&targets)?);
        data.contexts.extend(chunk.iter().map(|w| w.context.clone()));
    }
    Ok(data)
}

impl ContinuousPrior {
    pub fn new(config: PriorConfig, code_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new("stage2.cont");
        let d = config.hidden;
        let encoder = ContextEncoder::new(&mut store, &config, &mut rng);
        let input = Linear::new(&mut store, "cont.input", code_dim + 1, d, &mut rng);
        let pos = store.add_uniform("cont.pos", &[config.token_len(), d], d, &mut rng);
        let layers = (0..config.selfcond_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("cont.layer{i}"), d, config.heads, false, &mut rng))
            .collect();
        let ln_out = LayerNorm::new(&mut store, "cont.ln_out", d);
        let head = Linear::new(&mut store, "cont.head", d, code_dim, &mut rng);
        Ok(ContinuousPrior { config, code_dim, store, encoder, input, pos, layers, ln_out, head, noise_std: 0.0 })
    }

    fn dropout(&self, tape: &Tape) -> f64 {
        if tape.is_training() {
            self.config.dropout
        } else {
            0.0
        }
    }

    /// Rows `[B, L, n_z + 1]` for positions `start..start+L` given the
    /// previous latents (`None` is the start row).
    fn input_rows(&self, prev: &[Option<&[f64]>], batch: usize) -> Result<Tensor> {
        let nz = self.code_dim;
        let mut data = Vec::with_capacity(prev.len() * (nz + 1));
        for p in prev {
            match p {
                Some(z) => {
                    data.extend_from_slice(z);
                    data.push(0.0);
                }
                None => {
                    data.extend(std::iter::repeat_n(0.0, nz));
                    data.push(1.0);
                }
            }
        }
        Tensor::new(vec![batch, prev.len() / batch, nz + 1], data)
    }

    fn embed(&self, tape: &mut Tape, rows: Tensor, start: usize) -> Result<Var> {
        let l = rows.shape()[1];
        let x = tape.constant(rows);
        let x = self.input.forward(tape, &self.store, x)?;
        let pos = tape.param(&self.store, self.pos);
        let pos = tape.slice(pos, 0, start, l)?;
        tape.add_trailing(x, pos)
    }

    /// Teacher-forced predictions `[B, m, n_z]`.
    pub fn predict(&self, tape: &mut Tape, contexts: &[&Tensor], latents: &[&Tensor]) -> Result<Var> {
        let m = self.config.token_len();
        let p = self.dropout(tape);
        let mut prev: Vec<Option<&[f64]>> = Vec::with_capacity(latents.len() * m);
        for z in latents {
            if z.shape() != [m, self.code_dim] {
                return Err(HdtError::Config(format!(
                    "expected {m}×{} latents, got {:?}",
                    self.code_dim,
                    z.shape()
                )));
            }
            prev.push(None);
            prev.extend((0..m - 1).map(|i| Some(z.row(i))));
        }
        let memory = self.encoder.forward(tape, &self.store, contexts, p)?;
        let rows = self.input_rows(&prev, latents.len())?;
        let mut x = self.embed(tape, rows, 0)?;
        x = tape.dropout(x, p);
        for layer in &self.layers {
            x = layer.forward(tape, &self.store, x, memory, None, p)?;
        }
        let x = self.ln_out.forward(tape, &self.store, x)?;
        self.head.forward(tape, &self.store, x)
    }

    pub fn loss(&self, tape: &mut Tape, contexts: &[&Tensor], latents: &[&Tensor]) -> Result<Var> {
        let pred = self.predict(tape, contexts, latents)?;
        let mut data = Vec::new();
        for z in latents {
            data.extend_from_slice(z.data());
        }
        let shape = tape.shape(pred).to_vec();
        let target = tape.constant(Tensor::new(shape, data)?);
        tape.mse(pred, target)
    }

    /// Samples one latent sequence; noise is `noise_std·√temperature`, and
    /// none below the greedy threshold.
    pub fn sample<R: Rng>(&self, memory: &Tensor, cfg: &SamplerConfig, rng: &mut R) -> Result<Tensor> {
        let (m, nz) = (self.config.token_len(), self.code_dim);
        let sigma = if cfg.temperature < cfg.greedy_threshold {
            0.0
        } else {
            self.noise_std * cfg.temperature.sqrt()
        };
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut caches = self
            .layers
            .iter()
            .map(|l| l.start_cache(&self.store, memory, None))
            .collect::<Result<Vec<LayerCache>>>()?;
        let mut out: Vec<f64> = Vec::with_capacity(m * nz);
        for t in 0..m {
            let prev = if t == 0 { None } else { Some(&out[(t - 1) * nz..t * nz]) };
            let rows = self.input_rows(&[prev], 1)?;
            let mut tape = Tape::eval();
            let mut x = self.embed(&mut tape, rows, t)?;
            for (layer, cache) in self.layers.iter().zip(&mut caches) {
                x = layer.step(&mut tape, &self.store, x, cache)?;
            }
            let x = self.ln_out.forward(&mut tape, &self.store, x)?;
            let y = self.head.forward(&mut tape, &self.store, x)?;
            let next: Vec<f64> = tape
                .value(y)
                .data()
                .iter()
                .map(|&mu| mu + sigma * normal.sample(rng))
                .collect();
            out.extend(next);
        }
        Tensor::new(vec![m, nz], out)
    }

    pub fn context_memory(&self, contexts: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::eval();
        tape.freeze(&self.store);
        let h = self.encoder.forward(&mut tape, &self.store, contexts, 0.0)?;
        Ok(tape.value(h).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousConfig {
    pub prior: PriorConfig,
    pub code_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ContinuousOutput {
    pub model: ContinuousPrior,
    pub log: Vec<f64>,
}

/// Trains encoder and decoder jointly on latent MSE, then sets the noise
/// scale to the eval-mode residual RMS over (up to 256) training windows.
pub fn train_continuous(data: &ContinuousData, config: &ContinuousConfig) -> Result<ContinuousOutput> {
    if data.contexts.is_empty() {
        return Err(HdtError::State("no training windows".into()));
    }
    let mut model = ContinuousPrior::new(config.prior.clone(), config.code_dim, config.seed)?;
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x434f_4e54);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..data.contexts.len()))
            .collect();
        let ctx: Vec<&Tensor> = batch.iter().map(|&i| &data.contexts[i]).collect();
        let lat: Vec<&Tensor> = batch.iter().map(|&i| &data.latents[i]).collect();
        let mut tape = Tape::training(rng.random());
        let loss = model.loss(&mut tape, &ctx, &lat)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(HdtError::NumericalAbort {
                step,
                reason: "non-finite continuous-prior loss".into(),
                last_good: None,
            });
        }
        let g = tape.backward(loss)?;
        let grads = tape.param_grads(&g, &model.store);
        opt.step(&mut model.store, &grads)?;
        log.push(v);
    }
    let n = data.contexts.len().min(256);
    let ctx: Vec<&Tensor> = data.contexts[..n].iter().collect();
    let lat: Vec<&Tensor> = data.latents[..n].iter().collect();
    let mut tape = Tape::eval();
    let loss = model.loss(&mut tape, &ctx, &lat)?;
    model.noise_std = tape.value(loss).item().sqrt();
    Ok(ContinuousOutput { model, log })
}

/// Forecast paths for one scaled window, in original units.
pub fn forecast_continuous(
    window: &SeriesWindow,
    stage1: &Stage1Model,
    model: &ContinuousPrior,
    cfg: &SamplerConfig,
) -> Result<ForecastDistribution> {
    cfg.validate()?;
    if stage1.config().code_dim != model.code_dim {
        return Err(HdtError::Config("code_dim mismatch between stage 1 and the continuous prior".into()));
    }
    let memory = model.context_memory(&[&window.context])?;
    let latents: Vec<Tensor> = (0..cfg.num_samples)
        .into_par_iter()
        .map(|p| model.sample(&memory, cfg, &mut path_rng(cfg.seed, p)))
        .collect::<Result<_>>()?;
    let decoded = stage1.target.decode_latents(&latents)?;
    ForecastDistribution::new(decoded.iter().map(|x| rescale(x, &window.scale)).collect())
}
