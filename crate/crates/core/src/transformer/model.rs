use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{DecoderLayer, EncoderLayer, LayerCache};
use crate::error::{HdtError, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::vq::TokenSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub variates: usize,
    pub history: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub base_layers: usize,
    pub selfcond_layers: usize,
    /// Size of the trend codebook.
    pub down_codebook: usize,
    /// Size of the target codebook.
    pub target_codebook: usize,
    pub dropout: f64,
    /// When false the target decoder has no condition path and ignores the
    /// trend tokens.
    pub use_selfcond: bool,
}

impl PriorConfig {
    pub fn new(variates: usize, history: usize, horizon: usize, hidden: usize, codebook: usize) -> Self {
        PriorConfig {
            variates,
            history,
            horizon,
            hidden,
            heads: 4,
            enc_layers: 2,
            base_layers: 3,
            selfcond_layers: 4,
            down_codebook: codebook,
            target_codebook: codebook,
            dropout: 0.1,
            use_selfcond: true,
        }
    }

    /// Tokens per window, `τ/2`.
    pub fn token_len(&self) -> usize {
        self.horizon / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HdtError::Config(m));
        if self.variates == 0 || self.history == 0 {
            return bad("variates and history must be positive".into());
        }
        if self.horizon < 2 || self.horizon % 2 != 0 {
            return bad(format!("horizon must be even and ≥ 2, got {}", self.horizon));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.enc_layers == 0 || self.base_layers == 0 || self.selfcond_layers == 0 {
            return bad("layer counts must be positive".into());
        }
        if self.down_codebook < 2 || self.target_codebook < 2 {
            return bad("codebook sizes must be ≥ 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Input projection, learned positions and self-attention layers over the
/// history window.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    input: Linear,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
    history: usize,
    variates: usize,
}

impl ContextEncoder {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, c: &PriorConfig, rng: &mut R) -> Self {
        let d = c.hidden;
        ContextEncoder {
            input: Linear::new(store, "encoder.input", c.variates, d, rng),
            pos: store.add_uniform("encoder.pos", &[c.history, d], d, rng),
            layers: (0..c.enc_layers)
                .map(|i| EncoderLayer::new(store, &format!("encoder.layer{i}"), d, c.heads, rng))
                .collect(),
            ln_out: LayerNorm::new(store, "encoder.ln_out", d),
            history: c.history,
            variates: c.variates,
        }
    }

    /// Projected inputs plus positions, before any attention layer.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, contexts: &[&Tensor]) -> Result<Var> {
        let (h, d) = (self.history, self.variates);
        let mut data = Vec::with_capacity(contexts.len() * h * d);
        for c in contexts {
            if c.shape() != [h, d] {
                return Err(HdtError::Config(format!(
                    "context encoder expects {h}×{d}, got {:?}",
                    c.shape()
                )));
            }
            data.extend_from_slice(c.data());
        }
        let x = tape.constant(Tensor::new(vec![contexts.len(), h, d], data)?);
        let x = self.input.forward(tape, store, x)?;
        let pos = tape.param(store, self.pos);
        tape.add_trailing(x, pos)
    }

    /// `[B, h, hidden]` encoding of the history windows.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, contexts: &[&Tensor], dropout: f64) -> Result<Var> {
        let mut x = self.embed(tape, store, contexts)?;
        x = tape.dropout(x, dropout);
        for layer in &self.layers {
            x = layer.forward(tape, store, x, dropout)?;
        }
        self.ln_out.forward(tape, store, x)
    }
}

/// Autoregressive decoder over one codebook. Input row `K` of the token
/// table is the start token.
#[derive(Clone, Debug)]
pub struct TokenDecoder {
    embed: ParamId,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    head: Linear,
    /// Embedding table and positions for the condition tokens.
    cond: Option<(ParamId, ParamId)>,
    pub vocab: usize,
    pub len: usize,
}

/// Incremental decoding state for a batch of sequences.
#[derive(Clone, Debug)]
pub struct DecodeState {
    caches: Vec<LayerCache>,
    pub position: usize,
    pub batch: usize,
}

impl TokenDecoder {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c: &PriorConfig,
        vocab: usize,
        layers: usize,
        cond_vocab: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let (d, m) = (c.hidden, c.token_len());
        let embed = store.add_uniform(&format!("{name}.embed"), &[vocab + 1, d], d, rng);
        let pos = store.add_uniform(&format!("{name}.pos"), &[m, d], d, rng);
        let cond = cond_vocab.map(|cv| {
            (
                store.add_uniform(&format!("{name}.cond_embed"), &[cv, d], d, rng),
                store.add_uniform(&format!("{name}.cond_pos"), &[m, d], d, rng),
            )
        });
        TokenDecoder {
            embed,
            pos,
            layers: (0..layers)
                .map(|i| DecoderLayer::new(store, &format!("{name}.layer{i}"), d, c.heads, cond.is_some(), rng))
                .collect(),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d),
            head: Linear::new(store, &format!("{name}.head"), d, vocab, rng),
            cond,
            vocab,
            len: m,
        }
    }

    pub fn bos(&self) -> usize {
        self.vocab
    }

    pub fn has_condition(&self) -> bool {
        self.cond.is_some()
    }

    /// Output head weight and bias.
    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Token-table rows for the input positions `[B, L, d]`; `inputs` holds
    /// `B·L` indices (the start token included).
    pub fn embed_inputs(&self, tape: &mut Tape, store: &ParamStore, inputs: &[usize], batch: usize, start: usize) -> Result<Var> {
        let l = inputs.len() / batch;
        if start + l > self.len {
            return Err(HdtError::Config(format!(
                "decoder positions {start}..{} exceed length {}",
                start + l,
                self.len
            )));
        }
        let table = tape.param(store, self.embed);
        let e = tape.embedding(table, inputs)?;
        let d = tape.shape(e)[1];
        let e = tape.reshape(e, &[batch, l, d])?;
        let pos = tape.param(store, self.pos);
        let pos = tape.slice(pos, 0, start, l)?;
        tape.add_trailing(e, pos)
    }

    /// Condition sequence `[B, m, d]` for the second cross-attention path.
    pub fn embed_condition(&self, tape: &mut Tape, store: &ParamStore, cond: &[usize], batch: usize) -> Result<Var> {
        let Some((table, pos)) = self.cond else {
            return Err(HdtError::Config("decoder has no condition path".into()));
        };
        let table = tape.param(store, table);
        let e = tape.embedding(table, cond)?;
        let d = tape.shape(e)[1];
        let e = tape.reshape(e, &[batch, cond.len() / batch, d])?;
        let pos = tape.param(store, pos);
        tape.add_trailing(e, pos)
    }

    /// Logits `[B·L, vocab]` from embedded inputs `[B, L, d]`.
    pub fn logits_from_embedded(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        cond: Option<Var>,
        dropout: f64,
    ) -> Result<Var> {
        let mut x = tape.dropout(x, dropout);
        for layer in &self.layers {
            x = layer.forward(tape, store, x, memory, cond, dropout)?;
        }
        let x = self.ln_out.forward(tape, store, x)?;
        let logits = self.head.forward(tape, store, x)?;
        let [b, l, k] = *tape.shape(logits) else { unreachable!() };
        tape.reshape(logits, &[b * l, k])
    }

    /// Teacher-forced logits `[B·m, vocab]`: inputs are the start token
    /// followed by all but the last target.
    pub fn teacher_forced_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        targets: &[&TokenSequence],
        memory: Var,
        cond: Option<&[&TokenSequence]>,
        dropout: f64,
    ) -> Result<Var> {
        let batch = targets.len();
        let mut inputs = Vec::with_capacity(batch * self.len);
        for t in targets {
            check_tokens(t, self.vocab, self.len)?;
            inputs.push(self.bos());
            inputs.extend_from_slice(&t.indices[..self.len - 1]);
        }
        let x = self.embed_inputs(tape, store, &inputs, batch, 0)?;
        let c = match (cond, self.has_condition()) {
            (Some(seqs), true) => {
                let cond_vocab = store.get(self.cond.expect("condition path").0).shape()[0];
                let mut flat = Vec::with_capacity(batch * self.len);
                for s in seqs {
                    check_tokens(s, cond_vocab, self.len)?;
                    flat.extend_from_slice(&s.indices);
                }
                Some(self.embed_condition(tape, store, &flat, batch)?)
            }
            _ => None,
        };
        self.logits_from_embedded(tape, store, x, memory, c, dropout)
    }

    /// Mean next-token cross-entropy under teacher forcing.
    pub fn nll(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        targets: &[&TokenSequence],
        memory: Var,
        cond: Option<&[&TokenSequence]>,
        dropout: f64,
    ) -> Result<Var> {
        let logits = self.teacher_forced_logits(tape, store, targets, memory, cond, dropout)?;
        let flat: Vec<usize> = targets.iter().flat_map(|t| t.indices.iter().copied()).collect();
        tape.softmax_cross_entropy(logits, &flat)
    }

    /// Precomputes cross-attention keys/values for `memory [B, h, d]` and
    /// the optional condition tokens (`B·m` indices).
    pub fn start(&self, store: &ParamStore, memory: &Tensor, cond: Option<&[usize]>) -> Result<DecodeState> {
        let batch = memory.shape()[0];
        let cond_emb = match (cond, self.has_condition()) {
            (Some(c), true) => {
                let mut tape = Tape::eval();
                let e = self.embed_condition(&mut tape, store, c, batch)?;
                Some(tape.value(e).clone())
            }
            (None, true) => return Err(HdtError::Config("condition tokens required".into())),
            (_, false) => None,
        };
        let caches = self
            .layers
            .iter()
            .map(|l| l.start_cache(store, memory, cond_emb.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecodeState { caches, position: 0, batch })
    }

    /// Feeds the previous token of each sequence (the start token first) and
    /// returns next-token logits `[B, vocab]`.
    pub fn step(&self, store: &ParamStore, state: &mut DecodeState, prev: &[usize]) -> Result<Tensor> {
        if prev.len() != state.batch {
            return Err(HdtError::Dimension(format!(
                "{} tokens for a batch of {}",
                prev.len(),
                state.batch
            )));
        }
        let mut tape = Tape::eval();
        let mut x = self.embed_inputs(&mut tape, store, prev, state.batch, state.position)?;
        for (layer, cache) in self.layers.iter().zip(&mut state.caches) {
            x = layer.step(&mut tape, store, x, cache)?;
        }
        let x = self.ln_out.forward(&mut tape, store, x)?;
        let logits = self.head.forward(&mut tape, store, x)?;
        state.position += 1;
        let out = tape.value(logits).clone();
        out.reshape(&[state.batch, self.vocab])
    }

    pub fn num_params(c: &PriorConfig, vocab: usize, layers: usize, cond_vocab: Option<usize>) -> usize {
        let (d, m) = (c.hidden, c.token_len());
        let cond = cond_vocab.map_or(0, |cv| cv * d + m * d);
        (vocab + 1) * d
            + m * d
            + cond
            + layers * DecoderLayer::num_params(d, cond_vocab.is_some())
            + 2 * d
            + d * vocab
            + vocab
    }
}

fn check_tokens(seq: &TokenSequence, vocab: usize, len: usize) -> Result<()> {
    if seq.len() != len {
        return Err(HdtError::Config(format!("expected {len} tokens, got {}", seq.len())));
    }
    if let Some(&bad) = seq.indices.iter().find(|&&i| i >= vocab) {
        return Err(HdtError::Index(format!("token {bad} out of range for a codebook of {vocab}")));
    }
    Ok(())
}

/// Stage-two networks. `low` holds the context encoder and the trend
/// decoder; `high` holds the target decoder, so each phase can freeze the
/// other store.
#[derive(Clone, Debug)]
pub struct HdtPrior {
    pub config: PriorConfig,
    pub low: ParamStore,
    pub high: ParamStore,
    pub encoder: ContextEncoder,
    pub base: TokenDecoder,
    pub selfcond: TokenDecoder,
}

impl HdtPrior {
    pub fn new(config: PriorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut low = ParamStore::new("stage2.low");
        let mut high = ParamStore::new("stage2.high");
        let encoder = ContextEncoder::new(&mut low, &config, &mut rng);
        let base = TokenDecoder::new(&mut low, "base", &config, config.down_codebook, config.base_layers, None, &mut rng);
        let cond = config.use_selfcond.then_some(config.down_codebook);
        let selfcond = TokenDecoder::new(
            &mut high,
            "selfcond",
            &config,
            config.target_codebook,
            config.selfcond_layers,
            cond,
            &mut rng,
        );
        Ok(HdtPrior { config, low, high, encoder, base, selfcond })
    }

    fn dropout(&self, tape: &Tape) -> f64 {
        if tape.is_training() {
            self.config.dropout
        } else {
            0.0
        }
    }

    /// `H_p`: `[B, h, hidden]`.
    pub fn encode_context(&self, tape: &mut Tape, contexts: &[&Tensor]) -> Result<Var> {
        let p = self.dropout(tape);
        self.encoder.forward(tape, &self.low, contexts, p)
    }

    pub fn base_nll(&self, tape: &mut Tape, h_p: Var, s_down: &[&TokenSequence]) -> Result<Var> {
        let p = self.dropout(tape);
        self.base.nll(tape, &self.low, s_down, h_p, None, p)
    }

    pub fn selfcond_nll(
        &self,
        tape: &mut Tape,
        h_p: Var,
        s_down: &[&TokenSequence],
        s_pred: &[&TokenSequence],
    ) -> Result<Var> {
        let p = self.dropout(tape);
        let cond = self.selfcond.has_condition().then_some(s_down);
        self.selfcond.nll(tape, &self.high, s_pred, h_p, cond, p)
    }

    /// Eval-mode context encoding as a plain tensor.
    pub fn context_memory(&self, contexts: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::eval();
        tape.freeze(&self.low);
        let h = self.encode_context(&mut tape, contexts)?;
        Ok(tape.value(h).clone())
    }

    /// Scalar parameter counts `(low, high)` predicted from the configuration.
    pub fn expected_param_counts(c: &PriorConfig) -> (usize, usize) {
        let d = c.hidden;
        let encoder = c.variates * d + d + c.history * d + c.enc_layers * EncoderLayer::num_params(d) + 2 * d;
        let base = TokenDecoder::num_params(c, c.down_codebook, c.base_layers, None);
        let cond = c.use_selfcond.then_some(c.down_codebook);
        let high = TokenDecoder::num_params(c, c.target_codebook, c.selfcond_layers, cond);
        (encoder + base, high)
    }
}
