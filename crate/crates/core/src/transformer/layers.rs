use rand::Rng;

use crate::error::{HdtError, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Multi-head scaled dot-product attention with separate q/k/v/out maps.
#[derive(Clone, Debug)]
pub struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Keys and values already split into heads: `[B·H, L, d/H]` each.
#[derive(Clone, Debug)]
pub struct KeyValues {
    pub k: Tensor,
    pub v: Tensor,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Attention {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn num_params(&self) -> usize {
        4 * (self.dim * self.dim + self.dim)
    }

    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let [b, l, d] = *tape.shape(x) else {
            return Err(HdtError::Dimension(format!("attention input {:?}", tape.shape(x))));
        };
        let h = self.heads;
        let r = tape.reshape(x, &[b, l, h, d / h])?;
        let p = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(p, &[b * h, l, d / h])
    }

    fn merge_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let [bh, l, dh] = *tape.shape(x) else { unreachable!() };
        let h = self.heads;
        let r = tape.reshape(x, &[bh / h, h, l, dh])?;
        let p = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(p, &[bh / h, l, h * dh])
    }

    /// Projects `[B, L, d]` to per-head keys and values.
    pub fn keys_values(&self, tape: &mut Tape, store: &ParamStore, kv_in: Var) -> Result<(Var, Var)> {
        let k = self.wk.forward(tape, store, kv_in)?;
        let k = self.split_heads(tape, k)?;
        let v = self.wv.forward(tape, store, kv_in)?;
        let v = self.split_heads(tape, v)?;
        Ok((k, v))
    }

    /// Evaluates [`Self::keys_values`] off-tape for caching.
    pub fn cache_keys_values(&self, store: &ParamStore, kv_in: &Tensor) -> Result<KeyValues> {
        let mut tape = Tape::eval();
        let x = tape.constant(kv_in.clone());
        let (k, v) = self.keys_values(&mut tape, store, x)?;
        Ok(KeyValues { k: tape.value(k).clone(), v: tape.value(v).clone() })
    }

    /// Queries `[B, Lq, d]` against per-head keys/values `[B·H, Lk, d/H]`.
    /// With `causal`, query `i` sees keys up to `i + Lk − Lq`.
    pub fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        k: Var,
        v: Var,
        causal: bool,
        dropout: f64,
    ) -> Result<Var> {
        let q = self.wq.forward(tape, store, q_in)?;
        let q = self.split_heads(tape, q)?;
        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.bmm(q, kt)?;
        let dh = self.dim / self.heads;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if causal {
            scores = tape.causal_mask(scores)?;
        }
        let p = tape.softmax_last(scores);
        let p = tape.dropout(p, dropout);
        let ctx = tape.bmm(p, v)?;
        let merged = self.merge_heads(tape, ctx)?;
        self.wo.forward(tape, store, merged)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        causal: bool,
        dropout: f64,
    ) -> Result<Var> {
        let (k, v) = self.keys_values(tape, store, kv_in)?;
        self.attend(tape, store, q_in, k, v, causal, dropout)
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            l1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn num_params(&self) -> usize {
        self.l1.num_params() + self.l2.num_params()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, dropout);
        self.l2.forward(tape, store, h)
    }
}

/// `x + dropout(y)`.
pub(crate) fn residual(tape: &mut Tape, x: Var, y: Var, dropout: f64) -> Result<Var> {
    let y = tape.dropout(y, dropout);
    tape.add(x, y)
}

/// Pre-norm self-attention and feed-forward block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        EncoderLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, 4 * dim, rng),
        }
    }

    pub fn num_params(dim: usize) -> usize {
        2 * 2 * dim + 4 * (dim * dim + dim) + (dim * 4 * dim + 4 * dim) + (4 * dim * dim + dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let n = self.ln_attn.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n, n, false, dropout)?;
        let x = residual(tape, x, a, dropout)?;
        let n = self.ln_ff.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, n, dropout)?;
        residual(tape, x, f, dropout)
    }
}

/// Causal self-attention, cross-attention over the context encoding, an
/// optional second cross-attention over the condition sequence, then the
/// feed-forward block; each sublayer pre-normed with a residual.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    cond: Option<(LayerNorm, Attention)>,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Cached keys/values of one decoder layer during incremental decoding.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub self_kv: Option<KeyValues>,
    pub cross_kv: KeyValues,
    pub cond_kv: Option<KeyValues>,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        with_cond: bool,
        rng: &mut R,
    ) -> Self {
        let ln_self = LayerNorm::new(store, &format!("{name}.ln_self"), dim);
        let self_attn = Attention::new(store, &format!("{name}.self_attn"), dim, heads, rng);
        let ln_cross = LayerNorm::new(store, &format!("{name}.ln_cross"), dim);
        let cross_attn = Attention::new(store, &format!("{name}.cross_attn"), dim, heads, rng);
        let cond = with_cond.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.ln_cond"), dim),
                Attention::new(store, &format!("{name}.cond_attn"), dim, heads, rng),
            )
        });
        DecoderLayer {
            ln_self,
            self_attn,
            ln_cross,
            cross_attn,
            cond,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, 4 * dim, rng),
        }
    }

    pub fn num_params(dim: usize, with_cond: bool) -> usize {
        let attn_block = 2 * dim + 4 * (dim * dim + dim);
        let ff_block = 2 * dim + (dim * 4 * dim + 4 * dim) + (4 * dim * dim + dim);
        attn_block * if with_cond { 3 } else { 2 } + ff_block
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        cond: Option<Var>,
        dropout: f64,
    ) -> Result<Var> {
        let n = self.ln_self.forward(tape, store, x)?;
        let a = self.self_attn.forward(tape, store, n, n, true, dropout)?;
        let mut x = residual(tape, x, a, dropout)?;
        let n = self.ln_cross.forward(tape, store, x)?;
        let a = self.cross_attn.forward(tape, store, n, memory, false, dropout)?;
        x = residual(tape, x, a, dropout)?;
        if let (Some((ln, attn)), Some(c)) = (&self.cond, cond) {
            let n = ln.forward(tape, store, x)?;
            let a = attn.forward(tape, store, n, c, false, dropout)?;
            x = residual(tape, x, a, dropout)?;
        }
        let n = self.ln_ff.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, n, dropout)?;
        residual(tape, x, f, dropout)
    }

    pub fn start_cache(&self, store: &ParamStore, memory: &Tensor, cond: Option<&Tensor>) -> Result<LayerCache> {
        let cond_kv = match (&self.cond, cond) {
            (Some((_, attn)), Some(c)) => Some(attn.cache_keys_values(store, c)?),
            (None, _) => None,
            (Some(_), None) => {
                return Err(HdtError::Config("decoder layer expects a condition sequence".into()))
            }
        };
        Ok(LayerCache {
            self_kv: None,
            cross_kv: self.cross_attn.cache_keys_values(store, memory)?,
            cond_kv,
        })
    }

    /// One new position `[B, 1, d]`; appends its keys/values to the cache.
    /// Row for row the arithmetic matches [`Self::forward`] in eval mode.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, cache: &mut LayerCache) -> Result<Var> {
        let n = self.ln_self.forward(tape, store, x)?;
        let (k_new, v_new) = self.self_attn.keys_values(tape, store, n)?;
        let kv = KeyValues {
            k: append_time(cache.self_kv.as_ref().map(|c| &c.k), tape.value(k_new)),
            v: append_time(cache.self_kv.as_ref().map(|c| &c.v), tape.value(v_new)),
        };
        let k = tape.constant(kv.k.clone());
        let v = tape.constant(kv.v.clone());
        cache.self_kv = Some(kv);
        let a = self.self_attn.attend(tape, store, n, k, v, true, 0.0)?;
        let mut x = tape.add(x, a)?;

        let n = self.ln_cross.forward(tape, store, x)?;
        let k = tape.constant(cache.cross_kv.k.clone());
        let v = tape.constant(cache.cross_kv.v.clone());
        let a = self.cross_attn.attend(tape, store, n, k, v, false, 0.0)?;
        x = tape.add(x, a)?;
        if let (Some((ln, attn)), Some(c)) = (&self.cond, &cache.cond_kv) {
            let n = ln.forward(tape, store, x)?;
            let k = tape.constant(c.k.clone());
            let v = tape.constant(c.v.clone());
            let a = attn.attend(tape, store, n, k, v, false, 0.0)?;
            x = tape.add(x, a)?;
        }
        let n = self.ln_ff.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, n, 0.0)?;
        tape.add(x, f)
    }
}

/// Concatenates `[N, 1, e]` after `[N, t, e]` along the time axis.
fn append_time(cache: Option<&Tensor>, new: &Tensor) -> Tensor {
    let Some(old) = cache else { return new.clone() };
    let [n, t, e] = *old.shape() else { unreachable!() };
    let mut data = Vec::with_capacity(n * (t + 1) * e);
    for i in 0..n {
        data.extend_from_slice(&old.data()[i * t * e..(i + 1) * t * e]);
        data.extend_from_slice(&new.data()[i * e..(i + 1) * e]);
    }
    Tensor::new(vec![n, t + 1, e], data).expect("shape")
}
