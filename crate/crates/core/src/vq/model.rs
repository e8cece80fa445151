use rand::Rng;

use super::codebook::{self, init_entries, nearest_codes};
use super::{CodebookKind, TokenSequence};
use crate::error::{HdtError, Result};
use crate::nn::{Conv1d, ConvTranspose1d, LayerNorm};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Shape and size hyperparameters of one tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub variates: usize,
    pub horizon: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub dropout: f64,
    pub disc_channels: usize,
}

impl TokenizerConfig {
    pub fn new(variates: usize, horizon: usize, code_dim: usize, codebook_size: usize) -> Self {
        TokenizerConfig {
            variates,
            horizon,
            code_dim,
            codebook_size,
            beta: 0.25,
            dropout: 0.1,
            disc_channels: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HdtError::Config(m));
        if self.variates == 0 {
            return bad("variates must be positive".into());
        }
        if self.horizon < 2 || self.horizon % 2 != 0 {
            return bad(format!("horizon must be even and ≥ 2, got {}", self.horizon));
        }
        if self.code_dim == 0 {
            return bad("code_dim must be positive".into());
        }
        if self.codebook_size < 2 {
            return bad(format!("codebook_size must be ≥ 2, got {}", self.codebook_size));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Number of latent positions `s = τ/2`.
    pub fn latent_len(&self) -> usize {
        self.horizon / 2
    }
}

/// Three convolutions; the first halves the length, the last ends in tanh.
#[derive(Clone, Debug)]
pub struct Encoder {
    conv0: Conv1d,
    ln0: LayerNorm,
    conv1: Conv1d,
    ln1: LayerNorm,
    conv2: Conv1d,
}

/// Mirror of [`Encoder`]; the last transposed convolution doubles the length
/// and has no activation.
#[derive(Clone, Debug)]
pub struct Decoder {
    deconv0: ConvTranspose1d,
    ln0: LayerNorm,
    deconv1: ConvTranspose1d,
    ln1: LayerNorm,
    deconv2: ConvTranspose1d,
}

/// Two-layer convolutional critic emitting one logit per downsampled position.
#[derive(Clone, Debug)]
pub struct Discriminator {
    conv0: Conv1d,
    conv1: Conv1d,
}

impl Discriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, variates: usize, channels: usize, rng: &mut R) -> Self {
        Discriminator {
            conv0: Conv1d::new(store, "conv0", variates, channels, 4, 2, 1, rng),
            conv1: Conv1d::new(store, "conv1", channels, 1, 3, 1, 1, rng),
        }
    }

    /// `[B, D, τ]` → logits `[B, 1, τ/2]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv0.forward(tape, store, x)?;
        let h = tape.leaky_relu(h, 0.2);
        self.conv1.forward(tape, store, h)
    }
}

/// Outputs of one tokenizer pass on a tape.
pub struct TokenizerPass {
    /// Encoder output as rows `[B·s, n_z]`.
    pub latent: Var,
    /// Matched codebook rows `[B·s, n_z]`, differentiable w.r.t. the codebook.
    pub z_q: Var,
    /// Code values with an identity gradient into `latent`.
    pub quantized: Var,
    pub x_hat: Var,
    pub tokens: Vec<usize>,
}

/// Encoder, codebook, decoder and discriminator for one series kind.
///
/// `store` holds everything the generator optimizer updates (encoder,
/// decoder, codebook); the discriminator has its own store.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub kind: CodebookKind,
    pub store: ParamStore,
    pub disc_store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    pub discriminator: Discriminator,
    codebook: ParamId,
    /// Number of times each entry was selected during training.
    pub usage: Vec<u64>,
}

impl Tokenizer {
    pub fn new<R: Rng>(config: TokenizerConfig, kind: CodebookKind, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, nz) = (config.variates, config.code_dim);
        let mut store = ParamStore::new(prefix);
        let encoder = Encoder {
            conv0: Conv1d::new(&mut store, "encoder.conv0", d, nz, 4, 2, 1, rng),
            ln0: LayerNorm::new(&mut store, "encoder.ln0", nz),
            conv1: Conv1d::new(&mut store, "encoder.conv1", nz, nz, 3, 1, 1, rng),
            ln1: LayerNorm::new(&mut store, "encoder.ln1", nz),
            conv2: Conv1d::new(&mut store, "encoder.conv2", nz, nz, 3, 1, 1, rng),
        };
        let decoder = Decoder {
            deconv0: ConvTranspose1d::new(&mut store, "decoder.deconv0", nz, nz, 3, 1, 1, rng),
            ln0: LayerNorm::new(&mut store, "decoder.ln0", nz),
            deconv1: ConvTranspose1d::new(&mut store, "decoder.deconv1", nz, nz, 3, 1, 1, rng),
            ln1: LayerNorm::new(&mut store, "decoder.ln1", nz),
            deconv2: ConvTranspose1d::new(&mut store, "decoder.deconv2", nz, d, 4, 2, 1, rng),
        };
        let codebook = store.add("codebook", init_entries(config.codebook_size, nz, rng));
        let mut disc_store = ParamStore::new(format!("{prefix}.disc"));
        let discriminator = Discriminator::new(&mut disc_store, d, config.disc_channels, rng);
        Ok(Tokenizer {
            usage: vec![0; config.codebook_size],
            config,
            kind,
            store,
            disc_store,
            encoder,
            decoder,
            discriminator,
            codebook,
        })
    }

    pub fn codebook(&self) -> &Tensor {
        self.store.get(self.codebook)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    /// Weight of the decoder's final transposed convolution.
    pub fn last_layer_weight(&self) -> ParamId {
        self.decoder.deconv2.weight
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 3 || shape[1] != c.variates || shape[2] != c.horizon {
            return Err(HdtError::Config(format!(
                "tokenizer expects [B, {}, {}], got {shape:?}",
                c.variates, c.horizon
            )));
        }
        Ok(())
    }

    /// `[B, D, τ]` → latent rows `[B·s, n_z]`, bounded by tanh.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let (st, e, rate) = (&self.store, &self.encoder, self.config.dropout);
        let h = e.conv0.forward(tape, st, x)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, rate);
        let h = e.ln0.forward_channels(tape, st, h)?;
        let h = e.conv1.forward(tape, st, h)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, rate);
        let h = e.ln1.forward_channels(tape, st, h)?;
        let h = e.conv2.forward(tape, st, h)?;
        let h = tape.tanh(h);
        let [b, nz, s] = *tape.shape(h) else { unreachable!() };
        let rows = tape.permute(h, &[0, 2, 1])?;
        tape.reshape(rows, &[b * s, nz])
    }

    /// Latent rows `[B·s, n_z]` → `[B, D, τ]`.
    pub fn decode(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let (s, nz) = (self.config.latent_len(), self.config.code_dim);
        let shape = tape.shape(rows).to_vec();
        if shape.len() != 2 || shape[1] != nz || shape[0] % s != 0 {
            return Err(HdtError::Config(format!(
                "decoder expects rows [B·{s}, {nz}], got {shape:?}"
            )));
        }
        let b = shape[0] / s;
        let z = tape.reshape(rows, &[b, s, nz])?;
        let z = tape.permute(z, &[0, 2, 1])?;
        let (st, d, rate) = (&self.store, &self.decoder, self.config.dropout);
        let h = d.deconv0.forward(tape, st, z)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, rate);
        let h = d.ln0.forward_channels(tape, st, h)?;
        let h = d.deconv1.forward(tape, st, h)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, rate);
        let h = d.ln1.forward_channels(tape, st, h)?;
        d.deconv2.forward(tape, st, h)
    }

    /// Encoder, nearest-entry lookup and decoder on one tape.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<TokenizerPass> {
        let latent = self.encode(tape, x)?;
        let tokens = nearest_codes(self.codebook(), tape.value(latent));
        let table = tape.param(&self.store, self.codebook);
        let z_q = tape.embedding(table, &tokens)?;
        let code_values = tape.value(z_q).clone();
        let quantized = tape.straight_through(latent, code_values)?;
        let x_hat = self.decode(tape, quantized)?;
        Ok(TokenizerPass { latent, z_q, quantized, x_hat, tokens })
    }

    pub fn record_usage(&mut self, tokens: &[usize]) {
        for &t in tokens {
            self.usage[t] += 1;
        }
    }

    /// Number of entries selected at least once.
    pub fn codes_in_use(&self) -> usize {
        self.usage.iter().filter(|&&u| u > 0).count()
    }

    /// Deterministic latents for time-major `τ×D` series, one `s×n_z` matrix each.
    pub fn encode_latents(&self, series: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::eval();
        tape.freeze(&self.store);
        let x = tape.constant(to_channels(series)?);
        let rows = self.encode(&mut tape, x)?;
        Ok(split_rows(tape.value(rows), series.len()))
    }

    pub fn tokenize(&self, series: &[&Tensor]) -> Result<Vec<TokenSequence>> {
        let latents = self.encode_latents(series)?;
        Ok(latents
            .iter()
            .map(|l| TokenSequence {
                indices: nearest_codes(self.codebook(), l),
                kind: self.kind,
            })
            .collect())
    }

    /// Decodes `s×n_z` latent matrices to time-major `τ×D` series.
    pub fn decode_latents(&self, latents: &[Tensor]) -> Result<Vec<Tensor>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let nz = self.config.code_dim;
        let mut data = Vec::new();
        for l in latents {
            data.extend_from_slice(l.data());
        }
        let rows = Tensor::new(vec![data.len() / nz, nz], data)?;
        let mut tape = Tape::eval();
        tape.freeze(&self.store);
        let r = tape.constant(rows);
        let out = self.decode(&mut tape, r)?;
        Ok(from_channels(tape.value(out)))
    }

    pub fn detokenize(&self, sequences: &[TokenSequence]) -> Result<Vec<Tensor>> {
        let k = self.config.codebook_size;
        let latents = sequences
            .iter()
            .map(|s| {
                if s.kind != self.kind {
                    return Err(HdtError::Config(format!(
                        "{:?} tokens given to the {:?} tokenizer",
                        s.kind, self.kind
                    )));
                }
                if let Some(&bad) = s.indices.iter().find(|&&i| i >= k) {
                    return Err(HdtError::Index(format!("token {bad} out of range for K = {k}")));
                }
                Ok(codebook::lookup(self.codebook(), &s.indices))
            })
            .collect::<Result<Vec<_>>>()?;
        self.decode_latents(&latents)
    }

    /// Eval-mode mean squared reconstruction error through the quantizer.
    pub fn reconstruction_mse(&self, series: &[&Tensor]) -> Result<f64> {
        let mut tape = Tape::eval();
        tape.freeze(&self.store);
        let x = tape.constant(to_channels(series)?);
        let pass = self.forward(&mut tape, x)?;
        let mse = tape.mse(x, pass.x_hat)?;
        Ok(tape.value(mse).item())
    }
}

/// Stacks time-major `τ×D` matrices into a channel-major `[B, D, τ]` batch.
pub fn to_channels(series: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = series.first() else {
        return Err(HdtError::State("empty batch".into()));
    };
    let [tau, d] = *first.shape() else {
        return Err(HdtError::Dimension(format!("expected τ×D, got {:?}", first.shape())));
    };
    let mut data = Vec::with_capacity(series.len() * tau * d);
    for s in series {
        if s.shape() != [tau, d] {
            return Err(HdtError::Dimension(format!(
                "batch mixes shapes {:?} and {:?}",
                first.shape(),
                s.shape()
            )));
        }
        let src = s.data();
        for v in 0..d {
            data.extend((0..tau).map(|t| src[t * d + v]));
        }
    }
    Tensor::new(vec![series.len(), d, tau], data)
}

/// Inverse of [`to_channels`].
pub fn from_channels(batch: &Tensor) -> Vec<Tensor> {
    let [b, d, tau] = *batch.shape() else { panic!("expected [B, D, τ]") };
    let src = batch.data();
    (0..b)
        .map(|i| {
            let block = &src[i * d * tau..(i + 1) * d * tau];
            let mut data = vec![0.0; tau * d];
            for v in 0..d {
                for t in 0..tau {
                    data[t * d + v] = block[v * tau + t];
                }
            }
            Tensor::new(vec![tau, d], data).expect("shape")
        })
        .collect()
}

fn split_rows(rows: &Tensor, parts: usize) -> Vec<Tensor> {
    let nz = rows.shape()[1];
    let per = rows.shape()[0] / parts;
    rows.data()
        .chunks(per * nz)
        .map(|c| Tensor::new(vec![per, nz], c.to_vec()).expect("shape"))
        .collect()
}
