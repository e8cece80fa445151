use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{adaptive_lambda, discriminator_loss, generator_loss, l2_reg_loss, vq_loss};
use super::model::{to_channels, Tokenizer, TokenizerConfig};
use super::CodebookKind;
use crate::error::{HdtError, Result};
use crate::series::{downsample, effective_kernel, SeriesWindow};
use crate::tensor::{Adam, AdamConfig, Checkpoint, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub tokenizer: TokenizerConfig,
    /// Moving-average width used to derive the trend series.
    pub trend_kernel: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// First 0-based step at which the adversarial term is active.
    /// `steps` disables it.
    pub gan_start: usize,
    pub seed: u64,
}

impl Stage1Config {
    pub fn new(tokenizer: TokenizerConfig, trend_kernel: usize, steps: usize, seed: u64) -> Self {
        Stage1Config {
            tokenizer,
            trend_kernel,
            steps,
            batch_size: 64,
            lr: 1e-3,
            gan_start: gan_onset(steps),
            seed,
        }
    }
}

/// `⌈0.75·steps⌉`.
pub fn gan_onset(steps: usize) -> usize {
    (3 * steps).div_ceil(4)
}

/// One row of the per-step training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1LogRow {
    pub step: usize,
    pub rec: f64,
    pub codebook: f64,
    pub commit: f64,
    pub l2: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub lambda: f64,
}

impl Stage1LogRow {
    pub const HEADER: [&'static str; 8] =
        ["step", "rec", "codebook", "commit", "l2", "gan_g", "gan_d", "lambda"];

    pub fn record(&self) -> [String; 8] {
        [
            self.step.to_string(),
            self.rec.to_string(),
            self.codebook.to_string(),
            self.commit.to_string(),
            self.l2.to_string(),
            self.gan_g.to_string(),
            self.gan_d.to_string(),
            self.lambda.to_string(),
        ]
    }
}

/// Target and trend tokenizers trained together.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub target: Tokenizer,
    pub trend: Tokenizer,
    pub trend_kernel: usize,
}

impl Stage1Model {
    /// `trend_kernel` is clamped to the largest odd value within the horizon.
    pub fn new(config: &TokenizerConfig, trend_kernel: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Stage1Model {
            target: Tokenizer::new(config.clone(), CodebookKind::Target, "stage1.target", &mut rng)?,
            trend: Tokenizer::new(config.clone(), CodebookKind::Downsampled, "stage1.trend", &mut rng)?,
            trend_kernel: effective_kernel(trend_kernel, config.horizon),
        })
    }

    /// Trend series fed to the downsampled tokenizer.
    pub fn trend_of(&self, target: &Tensor) -> Result<Tensor> {
        downsample(target, self.trend_kernel)
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.target.config
    }

    /// Parameters, usage counters and shape header. Optimizer state is
    /// appended by the trainer.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let c = self.config();
        ck.set("kind", "stage1");
        ck.set("variates", c.variates);
        ck.set("horizon", c.horizon);
        ck.set("code_dim", c.code_dim);
        ck.set("codebook_size", c.codebook_size);
        ck.set("beta", c.beta);
        ck.set("dropout", c.dropout);
        ck.set("disc_channels", c.disc_channels);
        ck.set("trend_kernel", self.trend_kernel);
        for tok in [&self.target, &self.trend] {
            for store in [&tok.store, &tok.disc_store] {
                ck.extend(store.iter().map(|p| (p.name.clone(), p.value.clone())));
            }
            let usage = tok.usage.iter().map(|&u| u as f64).collect();
            ck.push(format!("{}.usage", tok.store.prefix()), Tensor::vector(usage));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header_value("kind")? != "stage1" {
            return Err(HdtError::Checkpoint("not a stage-1 checkpoint".into()));
        }
        let num = |k: &str| -> Result<f64> {
            ck.header_value(k)?
                .parse()
                .map_err(|_| HdtError::Checkpoint(format!("header field {k} is not numeric")))
        };
        let mut config = TokenizerConfig::new(
            num("variates")? as usize,
            num("horizon")? as usize,
            num("code_dim")? as usize,
            num("codebook_size")? as usize,
        );
        config.beta = num("beta")?;
        config.dropout = num("dropout")?;
        config.disc_channels = num("disc_channels")? as usize;
        let mut model = Stage1Model::new(&config, num("trend_kernel")? as usize, 0)?;
        for tok in [&mut model.target, &mut model.trend] {
            tok.store.load_from(|n| ck.get(n))?;
            tok.disc_store.load_from(|n| ck.get(n))?;
            let name = format!("{}.usage", tok.store.prefix());
            let usage = ck
                .get(&name)
                .ok_or_else(|| HdtError::Checkpoint(format!("missing {name}")))?;
            tok.usage = usage.data().iter().map(|&u| u as u64).collect();
        }
        Ok(model)
    }
}

/// Periodic checkpointing during training.
#[derive(Clone, Debug)]
pub struct CheckpointPolicy {
    pub path: PathBuf,
    /// Save every this many steps (0: only at the end).
    pub every: usize,
    /// Extra header fields (e.g. a configuration hash).
    pub header: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub model: Stage1Model,
    pub target_log: Vec<Stage1LogRow>,
    pub trend_log: Vec<Stage1LogRow>,
}

struct Branch<'a> {
    tok: &'a mut Tokenizer,
    gen_opt: Adam,
    disc_opt: Adam,
    series: Vec<Tensor>,
}

impl Branch<'_> {
    fn step(&mut self, batch: &[usize], step: usize, gan_on: bool, tape_seed: u64) -> Result<Stage1LogRow> {
        let tok = &mut *self.tok;
        let refs: Vec<&Tensor> = batch.iter().map(|&i| &self.series[i]).collect();
        let mut tape = Tape::training(tape_seed);
        let x = tape.constant(to_channels(&refs)?);
        let pass = tok.forward(&mut tape, x)?;
        let vq = vq_loss(&mut tape, x, pass.x_hat, pass.latent, pass.z_q, tok.config.beta)?;
        let l2 = l2_reg_loss(&mut tape, pass.latent, pass.z_q)?;
        let objective = tape.add(vq.total, l2)?;
        let mut row = Stage1LogRow {
            step,
            rec: tape.value(vq.reconstruction).item(),
            codebook: tape.value(vq.codebook).item(),
            commit: tape.value(vq.commitment).item(),
            l2: tape.value(l2).item(),
            gan_g: 0.0,
            gan_d: 0.0,
            lambda: 0.0,
        };
        if !tape.value(objective).item().is_finite() {
            return Err(HdtError::Training(format!("non-finite {:?} loss", tok.kind)));
        }

        let g = tape.backward(objective)?;
        let mut grads = tape.param_grads(&g, &tok.store);
        if gan_on {
            let d_loss = discriminator_loss(&mut tape, &tok.discriminator, &tok.disc_store, x, pass.x_hat)?;
            let dg = tape.backward(d_loss)?;
            let disc_grads = tape.param_grads(&dg, &tok.disc_store);
            self.disc_opt.step(&mut tok.disc_store, &disc_grads)?;

            // The generator term sees the discriminator after its update.
            let g_loss = generator_loss(&mut tape, &tok.discriminator, &tok.disc_store, pass.x_hat)?;
            let rec_g = tape.backward(vq.reconstruction)?;
            let gan_g = tape.backward(g_loss)?;
            let rec_grads = tape.param_grads(&rec_g, &tok.store);
            let gan_grads = tape.param_grads(&gan_g, &tok.store);
            let w = tok.last_layer_weight();
            let lambda = adaptive_lambda(rec_grads.norm_of(w), gan_grads.norm_of(w))?;
            grads.add_scaled(&gan_grads, lambda);
            row.gan_d = tape.value(d_loss).item();
            row.gan_g = tape.value(g_loss).item();
            row.lambda = lambda;
            if !row.gan_d.is_finite() || !row.gan_g.is_finite() {
                return Err(HdtError::Training(format!("non-finite {:?} adversarial loss", tok.kind)));
            }
        }
        self.gen_opt.step(&mut tok.store, &grads)?;
        tok.record_usage(&pass.tokens);
        Ok(row)
    }

    fn optimizer_entries(&self) -> Vec<(String, Tensor)> {
        let prefix = self.tok.store.prefix();
        let mut out = self.gen_opt.state_entries(&format!("{prefix}.adam"), &self.tok.store);
        out.extend(self.disc_opt.state_entries(&format!("{prefix}.disc.adam"), &self.tok.disc_store));
        out
    }
}

/// Trains both tokenizers on the (already scaled) windows.
///
/// Each step draws one batch of window indices shared by the two branches.
/// Before `gan_start` the generator minimizes the quantization objective
/// plus the ℓ2 term; from then on every step first updates the
/// discriminator and then adds the adaptively weighted adversarial term.
pub fn train_stage1(
    windows: &[SeriesWindow],
    config: &Stage1Config,
    checkpoints: Option<&CheckpointPolicy>,
) -> Result<Stage1Output> {
    config.tokenizer.validate()?;
    if windows.is_empty() {
        return Err(HdtError::State("no training windows".into()));
    }
    if config.batch_size == 0 || config.steps == 0 {
        return Err(HdtError::Config("batch_size and steps must be positive".into()));
    }
    let mut model = Stage1Model::new(&config.tokenizer, config.trend_kernel, config.seed)?;
    let targets: Vec<Tensor> = windows.iter().map(|w| w.target.clone()).collect();
    let trends = targets
        .iter()
        .map(|t| model.trend_of(t))
        .collect::<Result<Vec<_>>>()?;
    let adam = AdamConfig::with_lr(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5354_4147_4531);
    let Stage1Model { target, trend, trend_kernel } = &mut model;
    let trend_kernel = *trend_kernel;
    let mut branches = [
        Branch {
            gen_opt: Adam::new(adam, &target.store),
            disc_opt: Adam::new(adam, &target.disc_store),
            tok: target,
            series: targets,
        },
        Branch {
            gen_opt: Adam::new(adam, &trend.store),
            disc_opt: Adam::new(adam, &trend.disc_store),
            tok: trend,
            series: trends,
        },
    ];
    let mut logs = [Vec::with_capacity(config.steps), Vec::with_capacity(config.steps)];
    let mut last_good: Option<PathBuf> = None;

    for step in 0..config.steps {
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..windows.len()))
            .collect();
        let gan_on = step >= config.gan_start;
        for (b, log) in branches.iter_mut().zip(&mut logs) {
            let tape_seed = rng.random();
            match b.step(&batch, step, gan_on, tape_seed) {
                Ok(row) => log.push(row),
                Err(HdtError::Training(reason)) => {
                    return Err(HdtError::NumericalAbort { step, reason, last_good })
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(policy) = checkpoints {
            let done = step + 1;
            if done == config.steps || (policy.every > 0 && done % policy.every == 0) {
                let mut ck = Stage1Model {
                    target: branches[0].tok.clone(),
                    trend: branches[1].tok.clone(),
                    trend_kernel,
                }
                .to_checkpoint();
                ck.set("step", done);
                ck.set("seed", config.seed);
                for (k, v) in &policy.header {
                    ck.set(k, v);
                }
                for b in &branches {
                    ck.extend(b.optimizer_entries());
                }
                ck.save(&policy.path)?;
                last_good = Some(policy.path.clone());
            }
        }
    }
    drop(branches);
    let [target_log, trend_log] = logs;
    Ok(Stage1Output { model, target_log, trend_log })
}
