use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{HdtPrior, PriorConfig};
use crate::error::{HdtError, Result};
use crate::sampler::generate;
use crate::series::SeriesWindow;
use crate::tensor::{Adam, AdamConfig, Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::vq::{CheckpointPolicy, CodebookKind, Stage1Model, TokenSequence};

/// Where the trend tokens conditioning the target decoder come from while it
/// is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelfCondSource {
    /// Tokens of the true trend (teacher forcing).
    GroundTruth,
    /// Tokens sampled from the frozen trend decoder at temperature 1.
    Generated,
}

impl SelfCondSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SelfCondSource::GroundTruth => "ground_truth",
            SelfCondSource::Generated => "generated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(SelfCondSource::GroundTruth),
            "generated" => Ok(SelfCondSource::Generated),
            _ => Err(HdtError::Config(format!(
                "selfcond_source must be ground_truth or generated, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub prior: PriorConfig,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub selfcond_source: SelfCondSource,
    /// Stop after phase 1.
    pub phase1_only: bool,
}

impl Stage2Config {
    pub fn new(prior: PriorConfig, phase1_steps: usize, phase2_steps: usize, seed: u64) -> Self {
        Stage2Config {
            prior,
            phase1_steps,
            phase2_steps,
            batch_size: 64,
            lr: 1e-3,
            seed,
            selfcond_source: SelfCondSource::GroundTruth,
            phase1_only: false,
        }
    }
}

/// Histories with the token targets of both levels.
#[derive(Clone, Debug)]
pub struct Stage2Data {
    pub contexts: Vec<Tensor>,
    pub s_down: Vec<TokenSequence>,
    pub s_pred: Vec<TokenSequence>,
}

impl Stage2Data {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

const TOKENIZE_CHUNK: usize = 256;

/// Tokenizes the targets and their trends with the frozen stage-1 model.
pub fn prepare_stage2(windows: &[SeriesWindow], stage1: &Stage1Model) -> Result<Stage2Data> {
    let mut data = Stage2Data { contexts: Vec::new(), s_down: Vec::new(), s_pred: Vec::new() };
    for chunk in windows.chunks(TOKENIZE_CHUNK) {
        let targets: Vec<&Tensor> = chunk.iter().map(|w| &w.target).collect();
        let trends = targets.iter().map(|t| stage1.trend_of(t)).collect::<Result<Vec<_>>>()?;
        let trend_refs: Vec<&Tensor> = trends.iter().collect();
        data.s_pred.extend(stage1.target.tokenize(&targets)?);
        data.s_down.extend(stage1.trend.tokenize(&trend_refs)?);
        data.contexts.extend(chunk.iter().map(|w| w.context.clone()));
    }
    Ok(data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2LogRow {
    pub phase: u8,
    pub step: usize,
    pub nll: f64,
}

impl Stage2LogRow {
    pub const HEADER: [&'static str; 3] = ["phase", "step", "nll"];

    pub fn record(&self) -> [String; 3] {
        [self.phase.to_string(), self.step.to_string(), self.nll.to_string()]
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub prior: HdtPrior,
    pub log: Vec<Stage2LogRow>,
}

/// Phase 1 fits the context encoder and trend decoder on the trend tokens;
/// phase 2 freezes them and fits the target decoder.
pub fn train_stage2(
    data: &Stage2Data,
    config: &Stage2Config,
    checkpoints: Option<&CheckpointPolicy>,
) -> Result<Stage2Output> {
    if data.is_empty() {
        return Err(HdtError::State("no training windows".into()));
    }
    if config.batch_size == 0 {
        return Err(HdtError::Config("batch_size must be positive".into()));
    }
    let mut prior = HdtPrior::new(config.prior.clone(), config.seed)?;
    let adam = AdamConfig::with_lr(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5354_4147_4532);
    let mut log = Vec::with_capacity(config.phase1_steps + config.phase2_steps);
    let mut last_good: Option<PathBuf> = None;

    let mut opt = Adam::new(adam, &prior.low);
    for step in 0..config.phase1_steps {
        let batch = draw_batch(&mut rng, data.len(), config.batch_size);
        let mut tape = Tape::training(rng.random());
        let contexts: Vec<&Tensor> = batch.iter().map(|&i| &data.contexts[i]).collect();
        let s_down: Vec<&TokenSequence> = batch.iter().map(|&i| &data.s_down[i]).collect();
        let h_p = prior.encode_context(&mut tape, &contexts)?;
        let loss = prior.base_nll(&mut tape, h_p, &s_down)?;
        let nll = finite_loss(&tape, loss, 1, step, &last_good)?;
        let g = tape.backward(loss)?;
        let grads = tape.param_grads(&g, &prior.low);
        opt.step(&mut prior.low, &grads)?;
        log.push(Stage2LogRow { phase: 1, step, nll });
        if let Some(p) = checkpoints {
            if due(p, step, config.phase1_steps) {
                save(&prior, config, p, 1, step + 1, &opt, "stage2.low.adam")?;
                last_good = Some(p.path.clone());
            }
        }
    }
    if config.phase1_only {
        return Ok(Stage2Output { prior, log });
    }

    let mut opt = Adam::new(adam, &prior.high);
    for step in 0..config.phase2_steps {
        let batch = draw_batch(&mut rng, data.len(), config.batch_size);
        let tape_seed = rng.random();
        let contexts: Vec<&Tensor> = batch.iter().map(|&i| &data.contexts[i]).collect();
        let s_pred: Vec<&TokenSequence> = batch.iter().map(|&i| &data.s_pred[i]).collect();
        // Frozen encoder, evaluated without dropout.
        let memory = prior.context_memory(&contexts)?;
        let generated;
        let s_down: Vec<&TokenSequence> = match config.selfcond_source {
            SelfCondSource::GroundTruth => batch.iter().map(|&i| &data.s_down[i]).collect(),
            SelfCondSource::Generated => {
                let mut rngs: Vec<ChaCha8Rng> =
                    batch.iter().map(|_| ChaCha8Rng::seed_from_u64(rng.random())).collect();
                generated = generate(&prior.base, &prior.low, &memory, None, 1.0, &mut rngs)?
                    .into_iter()
                    .map(|indices| TokenSequence { indices, kind: CodebookKind::Downsampled })
                    .collect::<Vec<_>>();
                generated.iter().collect()
            }
        };
        let mut tape = Tape::training(tape_seed);
        tape.freeze(&prior.low);
        let h_p = tape.constant(memory);
        let loss = prior.selfcond_nll(&mut tape, h_p, &s_down, &s_pred)?;
        let nll = finite_loss(&tape, loss, 2, step, &last_good)?;
        let g = tape.backward(loss)?;
        let grads = tape.param_grads(&g, &prior.high);
        opt.step(&mut prior.high, &grads)?;
        log.push(Stage2LogRow { phase: 2, step, nll });
        if let Some(p) = checkpoints {
            if due(p, step, config.phase2_steps) {
                save(&prior, config, p, 2, step + 1, &opt, "stage2.high.adam")?;
                last_good = Some(p.path.clone());
            }
        }
    }
    Ok(Stage2Output { prior, log })
}

fn draw_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

fn finite_loss(tape: &Tape, loss: Var, phase: u8, step: usize, last_good: &Option<PathBuf>) -> Result<f64> {
    let v = tape.value(loss).item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(HdtError::NumericalAbort {
            step,
            reason: format!("non-finite phase-{phase} loss"),
            last_good: last_good.clone(),
        })
    }
}

fn due(policy: &CheckpointPolicy, step: usize, total: usize) -> bool {
    let done = step + 1;
    done == total || (policy.every > 0 && done % policy.every == 0)
}

fn save(
    prior: &HdtPrior,
    config: &Stage2Config,
    policy: &CheckpointPolicy,
    phase: u8,
    step: usize,
    opt: &Adam,
    opt_prefix: &str,
) -> Result<()> {
    let mut ck = prior.to_checkpoint();
    ck.set("phase", phase);
    ck.set("step", step);
    ck.set("seed", config.seed);
    ck.set("selfcond_source", config.selfcond_source.as_str());
    for (k, v) in &policy.header {
        ck.set(k, v);
    }
    let store = if phase == 1 { &prior.low } else { &prior.high };
    ck.extend(opt.state_entries(opt_prefix, store));
    ck.save(&policy.path)
}

impl HdtPrior {
    /// Configuration header and the parameters of both stores.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new();
        ck.set("kind", "stage2");
        ck.set("variates", c.variates);
        ck.set("history", c.history);
        ck.set("horizon", c.horizon);
        ck.set("hidden", c.hidden);
        ck.set("heads", c.heads);
        ck.set("enc_layers", c.enc_layers);
        ck.set("base_layers", c.base_layers);
        ck.set("selfcond_layers", c.selfcond_layers);
        ck.set("down_codebook", c.down_codebook);
        ck.set("target_codebook", c.target_codebook);
        ck.set("dropout", c.dropout);
        ck.set("use_selfcond", c.use_selfcond);
        for store in [&self.low, &self.high] {
            ck.extend(store_entries(store));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header_value("kind")? != "stage2" {
            return Err(HdtError::Checkpoint("not a stage-2 checkpoint".into()));
        }
        let num = |k: &str| -> Result<usize> {
            ck.header_value(k)?
                .parse()
                .map_err(|_| HdtError::Checkpoint(format!("header field {k} is not an integer")))
        };
        let mut c = PriorConfig::new(num("variates")?, num("history")?, num("horizon")?, num("hidden")?, 2);
        c.heads = num("heads")?;
        c.enc_layers = num("enc_layers")?;
        c.base_layers = num("base_layers")?;
        c.selfcond_layers = num("selfcond_layers")?;
        c.down_codebook = num("down_codebook")?;
        c.target_codebook = num("target_codebook")?;
        c.dropout = ck
            .header_value("dropout")?
            .parse()
            .map_err(|_| HdtError::Checkpoint("header field dropout is not numeric".into()))?;
        c.use_selfcond = ck.header_value("use_selfcond")? == "true";
        let mut prior = HdtPrior::new(c, 0)?;
        prior.low.load_from(|n| ck.get(n))?;
        prior.high.load_from(|n| ck.get(n))?;
        Ok(prior)
    }
}

fn store_entries(store: &ParamStore) -> impl Iterator<Item = (String, Tensor)> + '_ {
    store.iter().map(|p| (p.name.clone(), p.value.clone()))
}
